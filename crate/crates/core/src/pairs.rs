//! Factor-pair construction: two videos sharing exactly one semantic
//! factor (static, dynamic, or identical).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::{flow_analog, style, Video, NUM_STYLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    Static,
    Dynamic,
    Identical,
}

impl Factor {
    pub fn name(&self) -> &'static str {
        match self {
            Factor::Static => "static",
            Factor::Dynamic => "dynamic",
            Factor::Identical => "identical",
        }
    }

    pub fn parse(s: &str) -> Result<Factor> {
        match s {
            "static" => Ok(Factor::Static),
            "dynamic" => Ok(Factor::Dynamic),
            "identical" => Ok(Factor::Identical),
            other => Err(Error::invalid(format!("unknown factor '{other}'"))),
        }
    }
}

/// Perturbation parameters that produced a pair, kept for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Identical,
    Shuffle { style_id: usize, permutation: Vec<usize> },
    FlowJitter { rotation_rad: f64, scale: f64 },
    Restyle { style_a: usize, style_b: usize },
}

#[derive(Debug, Clone)]
pub struct FactorPair<S: Scalar> {
    pub a: Video<S>,
    pub b: Video<S>,
    pub shared_factor: Factor,
    pub provenance: Provenance,
    /// Set when jittering a zero flow field (jitter of zero is zero).
    pub zero_flow_warning: bool,
}

/// Same video twice; the correlation ceiling for the probe.
pub fn make_identical_pair<S: Scalar>(v: &Video<S>, rng: &mut StreamRng) -> FactorPair<S> {
    let mut styled = style(rng.below(NUM_STYLES)).apply(v);
    if styled.flow.is_none() {
        styled.flow = Some(flow_analog(&v.rgb));
    }
    FactorPair {
        a: styled.clone(),
        b: styled,
        shared_factor: Factor::Identical,
        provenance: Provenance::Identical,
        zero_flow_warning: false,
    }
}

/// Static pair: same styled frames, temporally shuffled on one side.
/// `v` is the raw (unstyled) video; the shuffled side's flow analog is
/// recomputed from the shuffled frames so its dynamics match what a model
/// would see.
pub fn make_static_pair<S: Scalar>(v: &Video<S>, rng: &mut StreamRng) -> Result<FactorPair<S>> {
    if v.frames() < 2 {
        return Err(Error::invalid("make_static_pair: need at least 2 frames"));
    }
    let style_id = rng.below(NUM_STYLES);
    let perm = rng.non_identity_permutation(v.frames());
    make_static_pair_with(v, style_id, &perm)
}

/// Test hook with explicit style and permutation. An identity permutation
/// yields an Identical pair, not a Static one.
pub fn make_static_pair_with<S: Scalar>(
    v: &Video<S>,
    style_id: usize,
    perm: &[usize],
) -> Result<FactorPair<S>> {
    let s = style(style_id);
    let mut a = s.apply(v);
    if v.flow.is_none() {
        a.flow = Some(flow_analog(&v.rgb));
    }
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(FactorPair {
            a: a.clone(),
            b: a,
            shared_factor: Factor::Identical,
            provenance: Provenance::Identical,
            zero_flow_warning: false,
        });
    }
    let mut shuffled = v.permute_frames(perm)?;
    shuffled.flow = Some(flow_analog(&shuffled.rgb));
    let b = s.apply(&shuffled);
    Ok(FactorPair {
        a,
        b,
        shared_factor: Factor::Static,
        provenance: Provenance::Shuffle {
            style_id,
            permutation: perm.to_vec(),
        },
        zero_flow_warning: false,
    })
}

/// Static pair for two-stream inputs: same RGB and style on both sides,
/// flow of side b jittered in direction and magnitude.
pub fn make_static_pair_flow<S: Scalar>(
    v: &Video<S>,
    rng: &mut StreamRng,
) -> Result<FactorPair<S>> {
    let style_id = rng.below(NUM_STYLES);
    let rotation = rng.range_f64(30.0_f64.to_radians(), 180.0_f64.to_radians());
    let scale = rng.range_f64(0.5, 2.0);
    make_static_pair_flow_with(v, style_id, rotation, scale)
}

/// Test hook with explicit jitter; rotation 0 with scale 1 yields an
/// Identical pair.
pub fn make_static_pair_flow_with<S: Scalar>(
    v: &Video<S>,
    style_id: usize,
    rotation_rad: f64,
    scale: f64,
) -> Result<FactorPair<S>> {
    let flow = match &v.flow {
        Some(f) => f.clone(),
        None => flow_analog(&v.rgb),
    };
    let mut a = style(style_id).apply(v);
    a.flow = Some(flow.clone());
    if rotation_rad == 0.0 && scale == 1.0 {
        return Ok(FactorPair {
            a: a.clone(),
            b: a,
            shared_factor: Factor::Identical,
            provenance: Provenance::Identical,
            zero_flow_warning: false,
        });
    }
    let zero_flow = flow.data().iter().all(|v| v.to_f64_() == 0.0);
    let (sin, cos) = rotation_rad.sin_cos();
    let mut jittered = Vec::with_capacity(flow.len());
    for uv in flow.data().chunks_exact(2) {
        let (u, w) = (uv[0].to_f64_(), uv[1].to_f64_());
        jittered.push(S::from_f64(scale * (u * cos - w * sin)));
        jittered.push(S::from_f64(scale * (u * sin + w * cos)));
    }
    let mut b = a.clone();
    b.flow = Some(Tensor::from_vec(flow.shape(), jittered)?);
    Ok(FactorPair {
        a,
        b,
        shared_factor: Factor::Static,
        provenance: Provenance::FlowJitter {
            rotation_rad,
            scale,
        },
        zero_flow_warning: zero_flow,
    })
}

/// Dynamic pair: same video under two different styles. Dynamics are
/// untouched, so the flow analog (computed on the raw video) is shared
/// bitwise by both sides.
pub fn make_dynamic_pair<S: Scalar>(v: &Video<S>, rng: &mut StreamRng) -> Result<FactorPair<S>> {
    if NUM_STYLES < 2 {
        return Err(Error::invalid("make_dynamic_pair: need at least 2 styles"));
    }
    let s1 = rng.below(NUM_STYLES);
    let mut s2 = rng.below(NUM_STYLES - 1);
    if s2 >= s1 {
        s2 += 1;
    }
    make_dynamic_pair_with(v, s1, s2)
}

/// Test hook with explicit styles; equal styles yield an Identical pair.
pub fn make_dynamic_pair_with<S: Scalar>(
    v: &Video<S>,
    style_a: usize,
    style_b: usize,
) -> Result<FactorPair<S>> {
    let flow = match &v.flow {
        Some(f) => f.clone(),
        None => flow_analog(&v.rgb),
    };
    let mut a = style(style_a).apply(v);
    a.flow = Some(flow.clone());
    if style_a == style_b {
        return Ok(FactorPair {
            a: a.clone(),
            b: a,
            shared_factor: Factor::Identical,
            provenance: Provenance::Identical,
            zero_flow_warning: false,
        });
    }
    let mut b = style(style_b).apply(v);
    b.flow = Some(flow);
    Ok(FactorPair {
        a,
        b,
        shared_factor: Factor::Dynamic,
        provenance: Provenance::Restyle { style_a, style_b },
        zero_flow_warning: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{render, render_with_flow, sample_spec, DynamicFactor, StaticFactor};

    fn raw_video(seed: u64) -> Video<f32> {
        let mut rng = StreamRng::new(seed, "pairs-test");
        let spec = sample_spec(
            8,
            16,
            16,
            StaticFactor {
                palette: (seed % 4) as usize,
                texture: 1,
                shape: 0,
            },
            DynamicFactor {
                direction_bin: (seed % 8) as usize,
                speed: 1 + (seed % 2) as usize,
                flicker_period: 0,
            },
            0,
            false,
            &mut rng,
        );
        render(&spec)
    }

    #[test]
    fn static_pair_frames_are_permutation() {
        let v = raw_video(3);
        let mut rng = StreamRng::new(9, "sp");
        let pair = make_static_pair(&v, &mut rng).unwrap();
        assert_eq!(pair.shared_factor, Factor::Static);
        let frame_len = 16 * 16 * 3;
        let mut frames_a: Vec<&[f32]> = pair.a.rgb.data().chunks_exact(frame_len).collect();
        let mut frames_b: Vec<&[f32]> = pair.b.rgb.data().chunks_exact(frame_len).collect();
        // sorted frame lists equal elementwise
        let key = |f: &&[f32]| f.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        frames_a.sort_by_key(key);
        frames_b.sort_by_key(key);
        assert_eq!(frames_a, frames_b);
    }

    #[test]
    fn static_pair_identity_hook_is_identical() {
        let v = raw_video(4);
        let perm: Vec<usize> = (0..8).collect();
        let pair = make_static_pair_with(&v, 2, &perm).unwrap();
        assert_eq!(pair.shared_factor, Factor::Identical);
        assert_eq!(pair.a.rgb, pair.b.rgb);
    }

    #[test]
    fn static_pair_changes_difference_energy() {
        // frame-difference energy differs for any video with nonzero motion
        let mut differs = 0;
        for seed in 0..100u64 {
            let v = raw_video(seed);
            let mut rng = StreamRng::new(seed, "energy");
            let pair = make_static_pair(&v, &mut rng).unwrap();
            let energy = |video: &Video<f32>| -> f64 {
                let frame_len = 16 * 16 * 3;
                let d = video.rgb.data();
                let mut e = 0.0;
                for t in 0..7 {
                    for i in 0..frame_len {
                        e += (d[(t + 1) * frame_len + i] as f64 - d[t * frame_len + i] as f64)
                            .abs();
                    }
                }
                e
            };
            if (energy(&pair.a) - energy(&pair.b)).abs() > 1e-6 {
                differs += 1;
            }
        }
        assert_eq!(differs, 100);
    }

    #[test]
    fn dynamic_pair_same_style_hook_is_identical() {
        let v = raw_video(5);
        let pair = make_dynamic_pair_with(&v, 1, 1).unwrap();
        assert_eq!(pair.shared_factor, Factor::Identical);
    }

    #[test]
    fn dynamic_pair_preserves_frame_fingerprint() {
        // argsort of per-frame means is identical across sides
        for seed in 0..20u64 {
            let v = raw_video(seed);
            let mut rng = StreamRng::new(seed, "fp");
            let pair = make_dynamic_pair(&v, &mut rng).unwrap();
            let fingerprint = |video: &Video<f32>| -> Vec<usize> {
                let frame_len = 16 * 16 * 3;
                let means: Vec<f64> = video
                    .rgb
                    .data()
                    .chunks_exact(frame_len)
                    .map(|f| f.iter().map(|&v| v as f64).sum::<f64>())
                    .collect();
                let mut idx: Vec<usize> = (0..means.len()).collect();
                idx.sort_by(|&i, &j| means[i].partial_cmp(&means[j]).unwrap());
                idx
            };
            assert_eq!(fingerprint(&pair.a), fingerprint(&pair.b), "seed {seed}");
        }
    }

    #[test]
    fn dynamic_pair_flow_is_shared_bitwise() {
        let v = raw_video(6);
        let mut rng = StreamRng::new(1, "dynflow");
        let pair = make_dynamic_pair(&v, &mut rng).unwrap();
        assert_eq!(pair.a.flow, pair.b.flow);
    }

    #[test]
    fn dynamic_pair_is_pointwise_style_map() {
        // pixel trajectories of b are the affine image of a's under s2 o s1^-1
        let v = raw_video(7);
        let pair = make_dynamic_pair_with(&v, 2, 3).unwrap();
        let (s2, s1) = (style(3), style(2));
        for i in (0..pair.a.rgb.len()).step_by(97 * 3).map(|i| i - i % 3) {
            let a = [
                pair.a.rgb.data()[i] as f64,
                pair.a.rgb.data()[i + 1] as f64,
                pair.a.rgb.data()[i + 2] as f64,
            ];
            let mapped = s2.apply_pixel(s1.inverse_pixel(a));
            for c in 0..3 {
                assert!((mapped[c] - pair.b.rgb.data()[i + c] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn flow_jitter_rotation_pi_negates() {
        let spec_rng = &mut StreamRng::new(12, "fj");
        let spec = sample_spec(
            8,
            16,
            16,
            StaticFactor {
                palette: 0,
                texture: 0,
                shape: 0,
            },
            DynamicFactor {
                direction_bin: 2,
                speed: 2,
                flicker_period: 0,
            },
            0,
            false,
            spec_rng,
        );
        let v: Video<f32> = render_with_flow(&spec);
        let pair = make_static_pair_flow_with(&v, 0, std::f64::consts::PI, 1.0).unwrap();
        let fa = pair.a.flow.as_ref().unwrap();
        let fb = pair.b.flow.as_ref().unwrap();
        for (x, y) in fa.data().iter().zip(fb.data()) {
            assert!((x + y).abs() < 1e-5);
        }
    }

    #[test]
    fn flow_jitter_preserves_support() {
        let spec_rng = &mut StreamRng::new(13, "fjs");
        let spec = sample_spec(
            8,
            16,
            16,
            StaticFactor {
                palette: 1,
                texture: 1,
                shape: 1,
            },
            DynamicFactor {
                direction_bin: 5,
                speed: 1,
                flicker_period: 0,
            },
            0,
            false,
            spec_rng,
        );
        let v: Video<f32> = render_with_flow(&spec);
        let mut rng = StreamRng::new(14, "fjs2");
        let pair = make_static_pair_flow(&v, &mut rng).unwrap();
        let fa = pair.a.flow.as_ref().unwrap();
        let fb = pair.b.flow.as_ref().unwrap();
        for (uv_a, uv_b) in fa.data().chunks_exact(2).zip(fb.data().chunks_exact(2)) {
            let za = uv_a[0] == 0.0 && uv_a[1] == 0.0;
            let zb = uv_b[0].abs() < 1e-12 && uv_b[1].abs() < 1e-12;
            assert_eq!(za, zb);
        }
    }

    #[test]
    fn flow_jitter_identity_hook_is_identical() {
        let v = raw_video(8);
        let pair = make_static_pair_flow_with(&v, 1, 0.0, 1.0).unwrap();
        assert_eq!(pair.shared_factor, Factor::Identical);
    }

    #[test]
    fn zero_flow_jitter_warns() {
        let spec_rng = &mut StreamRng::new(15, "zf");
        let spec = sample_spec(
            8,
            16,
            16,
            StaticFactor {
                palette: 0,
                texture: 0,
                shape: 0,
            },
            DynamicFactor {
                direction_bin: 0,
                speed: 0,
                flicker_period: 0,
            },
            0,
            false,
            spec_rng,
        );
        let v: Video<f32> = render_with_flow(&spec);
        let mut rng = StreamRng::new(16, "zf2");
        let pair = make_static_pair_flow(&v, &mut rng).unwrap();
        assert!(pair.zero_flow_warning);
    }
}
