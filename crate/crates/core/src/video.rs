//! Synthetic video content: moving textured shapes on textured backgrounds,
//! fixed color-remap styles, and the frame-difference flow analog.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const COLOR_CHANNELS: usize = 3;
pub const FLOW_CHANNELS: usize = 2;
pub const DIRECTION_BINS: usize = 8;
pub const NUM_STYLES: usize = 4;

/// Static attributes: extractable from any single frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticFactor {
    pub palette: usize,
    pub texture: usize,
    pub shape: usize,
}

/// Dynamic attributes: arise only from multiple frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicFactor {
    /// Compass bin, 0..8; heading angle is bin * 45 degrees.
    pub direction_bin: usize,
    /// Pixels per frame, 1 or 2 (0 allowed as a test hook).
    pub speed: usize,
    /// Brightness modulation period in frames; 0 disables flicker.
    pub flicker_period: usize,
}

/// Full recipe for one synthetic video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub static_factor: StaticFactor,
    pub dynamic_factor: DynamicFactor,
    pub label: usize,
    /// Start position of the object center (toroidal coordinates).
    pub start_x: f64,
    pub start_y: f64,
    /// Texture phase salts for background and object.
    pub bg_salt: u64,
    pub obj_salt: u64,
    /// Camouflage mode: object color and texture statistics match the
    /// background, so only motion reveals the object.
    pub camouflage: bool,
}

impl VideoSpec {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn heading(&self) -> (f64, f64) {
        let angle = self.dynamic_factor.direction_bin as f64 * std::f64::consts::FRAC_PI_4;
        (angle.cos(), angle.sin())
    }

    /// Object center at frame t (toroidal wrap keeps heading constant).
    pub fn position(&self, t: usize) -> (f64, f64) {
        let (dx, dy) = self.heading();
        let s = self.dynamic_factor.speed as f64 * t as f64;
        (
            (self.start_x + s * dx).rem_euclid(self.width as f64),
            (self.start_y + s * dy).rem_euclid(self.height as f64),
        )
    }
}

/// A video plus its optional flow analog.
#[derive(Debug, Clone, PartialEq)]
pub struct Video<S: Scalar> {
    /// T x H x W x 3, values in [0, 1].
    pub rgb: Tensor<S>,
    /// T x H x W x 2 flow analog (u, v); last frame is all zero.
    pub flow: Option<Tensor<S>>,
}

impl<S: Scalar> Video<S> {
    pub fn frames(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    /// Reorders frames along the time axis; the flow analog is dropped
    /// (it no longer describes the new ordering) unless recomputed.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<Video<S>> {
        let t = self.frames();
        if perm.len() != t {
            return Err(Error::invalid(format!(
                "permutation length {} != frame count {}",
                perm.len(),
                t
            )));
        }
        let frame_len = self.rgb.len() / t;
        let src = self.rgb.data();
        let mut out = Vec::with_capacity(self.rgb.len());
        for &p in perm {
            if p >= t {
                return Err(Error::invalid(format!("permutation entry {p} out of range")));
            }
            out.extend_from_slice(&src[p * frame_len..(p + 1) * frame_len]);
        }
        Ok(Video {
            rgb: Tensor::from_vec(self.rgb.shape(), out)?,
            flow: None,
        })
    }
}

/// Fixed invertible per-pixel color transform, identical for all frames
/// and pixels. Matrices are circulant with equal column sums, so frame
/// means map through a single monotone affine function and all styles
/// preserve [0, 1] (the clamp below never fires on generated content).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleMap {
    pub id: usize,
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

pub fn style(id: usize) -> StyleMap {
    const STYLES: [([[f64; 3]; 3], [f64; 3]); NUM_STYLES] = [
        (
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.0],
        ),
        (
            // channel rotation (r, g, b) -> (b, r, g)
            [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            [0.0, 0.0, 0.0],
        ),
        (
            [[0.8, 0.1, 0.0], [0.0, 0.8, 0.1], [0.1, 0.0, 0.8]],
            [0.05, 0.02, 0.0],
        ),
        (
            [[0.7, 0.0, 0.15], [0.15, 0.7, 0.0], [0.0, 0.15, 0.7]],
            [0.0, 0.03, 0.06],
        ),
    ];
    let (matrix, offset) = STYLES[id % NUM_STYLES];
    StyleMap {
        id: id % NUM_STYLES,
        matrix,
        offset,
    }
}

impl StyleMap {
    pub fn apply_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i];
            *o = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2] + self.offset[i])
                .clamp(0.0, 1.0);
        }
        out
    }

    /// Styles the color channels; the flow analog is carried through
    /// untouched (styles act on color only).
    pub fn apply<S: Scalar>(&self, video: &Video<S>) -> Video<S> {
        let data = video.rgb.data();
        let mut out = Vec::with_capacity(data.len());
        for px in data.chunks_exact(COLOR_CHANNELS) {
            let styled = self.apply_pixel([px[0].to_f64_(), px[1].to_f64_(), px[2].to_f64_()]);
            out.extend(styled.iter().map(|&v| S::from_f64(v)));
        }
        Video {
            rgb: Tensor::from_vec(video.rgb.shape(), out).expect("style preserves shape"),
            flow: video.flow.clone(),
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse of the continuous (pre-clamp) map.
    pub fn inverse_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let det = self.determinant();
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let shifted = [
            rgb[0] - self.offset[0],
            rgb[1] - self.offset[1],
            rgb[2] - self.offset[2],
        ];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (adj[i][0] * shifted[0] + adj[i][1] * shifted[1] + adj[i][2] * shifted[2]) / det;
        }
        out
    }
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value noise in [0, 1], keyed by salt and lattice point.
fn hash_noise(salt: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(salt ^ splitmix((x as u64).wrapping_mul(0x51ed_270b)) ^ (y as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const PALETTES: [([f64; 3], [f64; 3]); 4] = [
    ([0.20, 0.25, 0.30], [0.90, 0.30, 0.20]),
    ([0.30, 0.20, 0.25], [0.20, 0.90, 0.35]),
    ([0.25, 0.30, 0.20], [0.25, 0.35, 0.95]),
    ([0.30, 0.30, 0.20], [0.90, 0.85, 0.25]),
];

pub fn palette_count() -> usize {
    PALETTES.len()
}

fn wrap_delta(a: f64, b: f64, extent: f64) -> f64 {
    // signed toroidal difference a - b in [-extent/2, extent/2)
    let mut d = (a - b) % extent;
    if d < -extent / 2.0 {
        d += extent;
    } else if d >= extent / 2.0 {
        d -= extent;
    }
    d
}

fn in_shape(shape: usize, dx: f64, dy: f64) -> bool {
    match shape {
        0 => dx.abs() <= 3.0 && dy.abs() <= 2.0,
        _ => (dx / 3.2) * (dx / 3.2) + (dy / 2.2) * (dy / 2.2) <= 1.0,
    }
}

/// Whether the object covers pixel (x, y) at frame t.
pub fn object_covers(spec: &VideoSpec, t: usize, x: usize, y: usize) -> bool {
    let (cx, cy) = spec.position(t);
    let dx = wrap_delta(x as f64, cx, spec.width as f64);
    let dy = wrap_delta(y as f64, cy, spec.height as f64);
    in_shape(spec.static_factor.shape, dx, dy)
}

/// Renders the raw (unstyled) video for a spec. Values lie in [0, 1].
pub fn render<S: Scalar>(spec: &VideoSpec) -> Video<S> {
    let (t, h, w) = spec.dims();
    let (bg_color, obj_color) = PALETTES[spec.static_factor.palette % PALETTES.len()];
    let obj_color = if spec.camouflage { bg_color } else { obj_color };
    let tex = spec.static_factor.texture as u64;
    let (tex_lo, tex_span) = if spec.camouflage { (0.55, 0.45) } else { (0.7, 0.3) };
    let mut data = Vec::with_capacity(t * h * w * COLOR_CHANNELS);
    for frame in 0..t {
        let (cx, cy) = spec.position(frame);
        let flicker = match spec.dynamic_factor.flicker_period {
            0 => 1.0,
            p => {
                0.7 + 0.3
                    * (2.0 * std::f64::consts::PI * frame as f64 / p as f64)
                        .cos()
            }
        };
        for y in 0..h {
            for x in 0..w {
                let dx = wrap_delta(x as f64, cx, w as f64);
                let dy = wrap_delta(y as f64, cy, h as f64);
                let on_object = in_shape(spec.static_factor.shape, dx, dy);
                let (color, noise) = if on_object {
                    // texture anchored to the object so it travels with it
                    let n = hash_noise(
                        spec.obj_salt ^ tex,
                        dx.round() as i64,
                        dy.round() as i64,
                    );
                    (obj_color, n)
                } else {
                    let n = hash_noise(spec.bg_salt ^ tex, x as i64, y as i64);
                    (bg_color, n)
                };
                let shade = tex_lo + tex_span * noise;
                let bright = if on_object { flicker } else { 1.0 };
                for c in 0..COLOR_CHANNELS {
                    data.push(S::from_f64(color[c] * shade * bright));
                }
            }
        }
    }
    Video {
        rgb: Tensor::from_vec(&[t, h, w, COLOR_CHANNELS], data).expect("render shape"),
        flow: None,
    }
}

/// Per-pixel temporal median, the background estimate used for centroid
/// tracking.
fn median_background<S: Scalar>(rgb: &Tensor<S>) -> Vec<f64> {
    let shape = rgb.shape();
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let frame_len = h * w * c;
    let data = rgb.data();
    let mut bg = vec![0.0f64; frame_len];
    let mut scratch = vec![0.0f64; t];
    for (i, out) in bg.iter_mut().enumerate() {
        for (f, s) in scratch.iter_mut().enumerate() {
            *s = data[f * frame_len + i].to_f64_();
        }
        scratch.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *out = if t % 2 == 1 {
            scratch[t / 2]
        } else {
            0.5 * (scratch[t / 2 - 1] + scratch[t / 2])
        };
    }
    bg
}

/// Circular (toroidal) weighted centroid along one axis of given extent.
fn circular_centroid(weights: &[(f64, f64)], extent: f64) -> Option<f64> {
    // weights: (coordinate, weight)
    let two_pi = std::f64::consts::TAU;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut total = 0.0;
    for &(coord, wgt) in weights {
        let phi = two_pi * coord / extent;
        sx += wgt * phi.cos();
        sy += wgt * phi.sin();
        total += wgt;
    }
    if total <= 1e-9 || (sx * sx + sy * sy).sqrt() < 1e-12 {
        return None;
    }
    let angle = sy.atan2(sx).rem_euclid(two_pi);
    Some(angle * extent / two_pi)
}

/// Computes the flow analog of a video from its frames alone: per-pixel
/// forward-difference magnitude projected onto the per-frame displacement
/// direction of the tracked object centroid. The final frame has no
/// forward difference and is left zero, as are frames whose centroid
/// displacement is unresolvable (pure flicker behaves like real flow:
/// brightness change without motion yields no flow).
pub fn flow_analog<S: Scalar>(rgb: &Tensor<S>) -> Tensor<S> {
    let shape = rgb.shape();
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let frame_len = h * w * c;
    let data = rgb.data();
    let bg = median_background(rgb);

    // Per-frame object centroid from deviation against the background.
    let mut centroids: Vec<Option<(f64, f64)>> = Vec::with_capacity(t);
    for f in 0..t {
        let frame = &data[f * frame_len..(f + 1) * frame_len];
        let mut wx: Vec<(f64, f64)> = Vec::with_capacity(h * w);
        let mut wy: Vec<(f64, f64)> = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * c;
                let mut dev = 0.0;
                for ch in 0..c {
                    dev += (frame[base + ch].to_f64_() - bg[base + ch]).abs();
                }
                wx.push((x as f64, dev));
                wy.push((y as f64, dev));
            }
        }
        let cx = circular_centroid(&wx, w as f64);
        let cy = circular_centroid(&wy, h as f64);
        centroids.push(match (cx, cy) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        });
    }

    let mut flow = vec![S::zero(); t * h * w * FLOW_CHANNELS];
    for f in 0..t.saturating_sub(1) {
        let dir = match (centroids[f], centroids[f + 1]) {
            (Some((x0, y0)), Some((x1, y1))) => {
                let dx = wrap_delta(x1, x0, w as f64);
                let dy = wrap_delta(y1, y0, h as f64);
                let norm = (dx * dx + dy * dy).sqrt();
                if norm < 0.25 {
                    None
                } else {
                    Some((dx / norm, dy / norm))
                }
            }
            _ => None,
        };
        let Some((ux, uy)) = dir else { continue };
        let cur = &data[f * frame_len..(f + 1) * frame_len];
        let next = &data[(f + 1) * frame_len..(f + 2) * frame_len];
        for p in 0..h * w {
            let base = p * c;
            let mut mag = 0.0;
            for ch in 0..c {
                mag += (next[base + ch].to_f64_() - cur[base + ch].to_f64_()).abs();
            }
            mag /= c as f64;
            let out = (f * h * w + p) * FLOW_CHANNELS;
            flow[out] = S::from_f64(mag * ux);
            flow[out + 1] = S::from_f64(mag * uy);
        }
    }
    Tensor::from_vec(&[t, h, w, FLOW_CHANNELS], flow).expect("flow shape")
}

/// Renders a spec and attaches its flow analog.
pub fn render_with_flow<S: Scalar>(spec: &VideoSpec) -> Video<S> {
    let mut v = render::<S>(spec);
    v.flow = Some(flow_analog(&v.rgb));
    v
}

/// Object mask at one frame, H x W with 1.0 on the object.
pub fn object_mask<S: Scalar>(spec: &VideoSpec, frame: usize) -> Tensor<S> {
    let (_, h, w) = spec.dims();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(if object_covers(spec, frame, x, y) {
                S::one()
            } else {
                S::zero()
            });
        }
    }
    Tensor::from_vec(&[h, w], data).expect("mask shape")
}

/// Samples the free (non-label-determined) parts of a spec.
pub fn sample_spec(
    frames: usize,
    height: usize,
    width: usize,
    static_factor: StaticFactor,
    dynamic_factor: DynamicFactor,
    label: usize,
    camouflage: bool,
    rng: &mut StreamRng,
) -> VideoSpec {
    VideoSpec {
        frames,
        height,
        width,
        static_factor,
        dynamic_factor,
        label,
        start_x: rng.range_f64(0.0, width as f64),
        start_y: rng.range_f64(0.0, height as f64),
        bg_salt: rng.next_u64(),
        obj_salt: rng.next_u64(),
        camouflage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(direction_bin: usize, speed: usize, flicker: usize) -> VideoSpec {
        VideoSpec {
            frames: 8,
            height: 16,
            width: 16,
            static_factor: StaticFactor {
                palette: 1,
                texture: 2,
                shape: 0,
            },
            dynamic_factor: DynamicFactor {
                direction_bin,
                speed,
                flicker_period: flicker,
            },
            label: 0,
            start_x: 5.0,
            start_y: 7.0,
            bg_salt: 11,
            obj_salt: 22,
            camouflage: false,
        }
    }

    #[test]
    fn render_values_in_unit_range() {
        let v: Video<f32> = render(&spec(3, 2, 2));
        assert!(v.rgb.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(v.rgb.all_finite());
    }

    #[test]
    fn styles_are_invertible_and_range_preserving() {
        for id in 0..NUM_STYLES {
            let s = style(id);
            assert!(s.determinant().abs() > 1e-6, "style {id} not bijective");
            let px = [0.3, 0.8, 0.1];
            let round = s.inverse_pixel(s.apply_pixel(px));
            for (a, b) in px.iter().zip(round) {
                assert!((a - b).abs() < 1e-9);
            }
            // corners of the color cube stay inside [0,1] before clamping
            for corner in 0..8 {
                let p = [
                    f64::from(corner & 1),
                    f64::from((corner >> 1) & 1),
                    f64::from((corner >> 2) & 1),
                ];
                let out = s.apply_pixel(p);
                assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn style_commutes_with_frame_permutation() {
        let v: Video<f32> = render(&spec(1, 1, 0));
        let perm = vec![3, 1, 0, 2, 7, 6, 5, 4];
        for id in 0..NUM_STYLES {
            let s = style(id);
            let a = s.apply(&v.permute_frames(&perm).unwrap());
            let b = s.apply(&v).permute_frames(&perm).unwrap();
            assert_eq!(a.rgb, b.rgb, "style {id} does not commute");
        }
    }

    #[test]
    fn flow_zero_for_motionless_nonflicker_video() {
        let v: Video<f64> = render(&spec(0, 0, 0));
        let flow = flow_analog(&v.rgb);
        assert!(flow.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flow_zero_for_pure_flicker() {
        // brightness change without motion yields no flow, like real flow
        let v: Video<f64> = render(&spec(0, 0, 2));
        let flow = flow_analog(&v.rgb);
        assert!(flow.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flow_direction_tracks_heading() {
        for bin in 0..DIRECTION_BINS {
            let v: Video<f64> = render(&spec(bin, 2, 0));
            let flow = flow_analog(&v.rgb);
            let data = flow.data();
            let mut su = 0.0;
            let mut sv = 0.0;
            for p in data.chunks_exact(2) {
                su += p[0];
                sv += p[1];
            }
            let angle = sv.atan2(su).rem_euclid(std::f64::consts::TAU);
            let want = bin as f64 * std::f64::consts::FRAC_PI_4;
            let mut diff = (angle - want).abs();
            if diff > std::f64::consts::PI {
                diff = std::f64::consts::TAU - diff;
            }
            assert!(
                diff < 0.6,
                "bin {bin}: recovered angle {angle:.2} vs {want:.2}"
            );
        }
    }

    #[test]
    fn camouflage_hides_object_per_frame() {
        let mut base = spec(2, 2, 0);
        base.camouflage = true;
        let v: Video<f64> = render(&base);
        // per-frame mean inside vs outside the mask should be close
        let mask = object_mask::<f64>(&base, 0);
        let (h, w) = (base.height, base.width);
        let frame = &v.rgb.data()[..h * w * 3];
        let mut on = (0.0, 0usize);
        let mut off = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let lum: f64 = (0..3).map(|c| frame[(y * w + x) * 3 + c]).sum();
                if mask.at(&[y, x]) > 0.5 {
                    on = (on.0 + lum, on.1 + 1);
                } else {
                    off = (off.0 + lum, off.1 + 1);
                }
            }
        }
        let mean_on = on.0 / on.1 as f64;
        let mean_off = off.0 / off.1 as f64;
        assert!((mean_on - mean_off).abs() < 0.12, "{mean_on} vs {mean_off}");
    }

    #[test]
    fn mask_matches_coverage() {
        let s = spec(4, 1, 0);
        let m = object_mask::<f32>(&s, 3);
        let mut count = 0;
        for y in 0..s.height {
            for x in 0..s.width {
                let covered = object_covers(&s, 3, x, y);
                assert_eq!(m.at(&[y, x]) > 0.5, covered);
                count += usize::from(covered);
            }
        }
        assert!(count > 10, "object visible in mask");
    }
}
