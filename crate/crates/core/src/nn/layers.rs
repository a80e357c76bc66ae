//! From-scratch layer primitives with explicit forward and backward
//! passes. Layouts are channel-last ([T,]H,W,C) so the innermost loops
//! run over contiguous input channels.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| S::from_f64(rng.range_f64(-bound, bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// 3x3 same-padding 2D convolution over [H, W, Cin] -> [H, W, Cout].
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    /// [cout, 3, 3, cin]
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub cin: usize,
    pub cout: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut StreamRng) -> Self {
        Conv2d {
            w: uniform_init(&[cout, 3, 3, cin], 9 * cin, rng),
            b: Tensor::zeros(&[cout]),
            cin,
            cout,
        }
    }

    #[inline]
    fn pack_patch(&self, xd: &[S], dims: (usize, usize), pos: (usize, usize), patch: &mut [S]) -> u32 {
        let (h, w) = dims;
        let (y, xx) = pos;
        let cin = self.cin;
        let mut valid = 0u32;
        for v in patch.iter_mut() {
            *v = S::zero();
        }
        for ky in 0..3usize {
            let iy = y as isize + ky as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..3usize {
                let ix = xx as isize + kx as isize - 1;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let tap = ky * 3 + kx;
                valid |= 1 << tap;
                let in_base = (iy as usize * w + ix as usize) * cin;
                patch[tap * cin..(tap + 1) * cin].copy_from_slice(&xd[in_base..in_base + cin]);
            }
        }
        valid
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cin {
            return Err(Error::shape(format!(
                "conv2d expects [H,W,{}], got {:?}",
                self.cin, shape
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(h * w * self.cout);
        let xd = x.data();
        let wd = self.w.data();
        let bd = self.b.data();
        let patch_len = 9 * self.cin;
        let mut patch = vec![S::zero(); patch_len];
        for y in 0..h {
            for xx in 0..w {
                self.pack_patch(xd, (h, w), (y, xx), &mut patch);
                for o in 0..self.cout {
                    let wrow = &wd[o * patch_len..(o + 1) * patch_len];
                    let mut acc = bd[o];
                    for (wv, xv) in wrow.iter().zip(&patch) {
                        acc += *wv * *xv;
                    }
                    out.push(acc);
                }
            }
        }
        Tensor::from_vec(&[h, w, self.cout], out)
    }

    /// Returns dx; accumulates into dw and db.
    pub fn backward(
        &self,
        x: &Tensor<S>,
        dout: &Tensor<S>,
        dw: &mut Tensor<S>,
        db: &mut Tensor<S>,
    ) -> Tensor<S> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let xd = x.data();
        let dod = dout.data();
        let wd = self.w.data();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let cin = self.cin;
        let patch_len = 9 * cin;
        let mut patch = vec![S::zero(); patch_len];
        let mut dpatch = vec![S::zero(); patch_len];
        let mut dx = vec![S::zero(); xd.len()];
        for y in 0..h {
            for xx in 0..w {
                let out_base = (y * w + xx) * self.cout;
                let valid = self.pack_patch(xd, (h, w), (y, xx), &mut patch);
                for v in dpatch.iter_mut() {
                    *v = S::zero();
                }
                for o in 0..self.cout {
                    let g = dod[out_base + o];
                    if g == S::zero() {
                        continue;
                    }
                    dbd[o] += g;
                    let wrow = &wd[o * patch_len..(o + 1) * patch_len];
                    let dwrow = &mut dwd[o * patch_len..(o + 1) * patch_len];
                    for ((dwv, dpv), (wv, xv)) in dwrow
                        .iter_mut()
                        .zip(dpatch.iter_mut())
                        .zip(wrow.iter().zip(&patch))
                    {
                        *dwv += g * *xv;
                        *dpv += g * *wv;
                    }
                }
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let tap = ky * 3 + kx;
                        if valid & (1 << tap) == 0 {
                            continue;
                        }
                        let iy = y + ky - 1;
                        let ix = xx + kx - 1;
                        let in_base = (iy * w + ix) * cin;
                        for (dst, src) in dx[in_base..in_base + cin]
                            .iter_mut()
                            .zip(&dpatch[tap * cin..(tap + 1) * cin])
                        {
                            *dst += *src;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), dx).expect("dx shape")
    }
}

/// 3x3x3 same-padding 3D convolution over [T, H, W, Cin] -> [T, H, W, Cout].
#[derive(Debug, Clone)]
pub struct Conv3d<S: Scalar> {
    /// [cout, 3, 3, 3, cin]
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub cin: usize,
    pub cout: usize,
}

impl<S: Scalar> Conv3d<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut StreamRng) -> Self {
        Conv3d {
            w: uniform_init(&[cout, 3, 3, 3, cin], 27 * cin, rng),
            b: Tensor::zeros(&[cout]),
            cin,
            cout,
        }
    }

    /// Gathers the 3x3x3 input patch around (tt, y, xx) into a contiguous
    /// buffer; out-of-bounds taps stay zero. Returns tap validity bits.
    #[inline]
    fn pack_patch(
        &self,
        xd: &[S],
        dims: (usize, usize, usize),
        pos: (usize, usize, usize),
        patch: &mut [S],
    ) -> u32 {
        let (t, h, w) = dims;
        let (tt, y, xx) = pos;
        let cin = self.cin;
        let mut valid = 0u32;
        for v in patch.iter_mut() {
            *v = S::zero();
        }
        for kt in 0..3usize {
            let it = tt as isize + kt as isize - 1;
            if it < 0 || it >= t as isize {
                continue;
            }
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let tap = (kt * 3 + ky) * 3 + kx;
                    valid |= 1 << tap;
                    let in_base = ((it as usize * h + iy as usize) * w + ix as usize) * cin;
                    patch[tap * cin..(tap + 1) * cin]
                        .copy_from_slice(&xd[in_base..in_base + cin]);
                }
            }
        }
        valid
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[3] != self.cin {
            return Err(Error::shape(format!(
                "conv3d expects [T,H,W,{}], got {:?}",
                self.cin, shape
            )));
        }
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(t * h * w * self.cout);
        let xd = x.data();
        let wd = self.w.data();
        let bd = self.b.data();
        let patch_len = 27 * self.cin;
        let mut patch = vec![S::zero(); patch_len];
        for tt in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    self.pack_patch(xd, (t, h, w), (tt, y, xx), &mut patch);
                    for o in 0..self.cout {
                        let wrow = &wd[o * patch_len..(o + 1) * patch_len];
                        let mut acc = bd[o];
                        for (wv, xv) in wrow.iter().zip(&patch) {
                            acc += *wv * *xv;
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::from_vec(&[t, h, w, self.cout], out)
    }

    pub fn backward(
        &self,
        x: &Tensor<S>,
        dout: &Tensor<S>,
        dw: &mut Tensor<S>,
        db: &mut Tensor<S>,
    ) -> Tensor<S> {
        let shape = x.shape();
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        let xd = x.data();
        let dod = dout.data();
        let wd = self.w.data();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let cin = self.cin;
        let patch_len = 27 * cin;
        let mut patch = vec![S::zero(); patch_len];
        let mut dpatch = vec![S::zero(); patch_len];
        let mut dx = vec![S::zero(); xd.len()];
        for tt in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let out_base = ((tt * h + y) * w + xx) * self.cout;
                    let valid = self.pack_patch(xd, (t, h, w), (tt, y, xx), &mut patch);
                    for v in dpatch.iter_mut() {
                        *v = S::zero();
                    }
                    for o in 0..self.cout {
                        let g = dod[out_base + o];
                        if g == S::zero() {
                            continue;
                        }
                        dbd[o] += g;
                        let wrow = &wd[o * patch_len..(o + 1) * patch_len];
                        let dwrow = &mut dwd[o * patch_len..(o + 1) * patch_len];
                        for ((dwv, dpv), (wv, xv)) in dwrow
                            .iter_mut()
                            .zip(dpatch.iter_mut())
                            .zip(wrow.iter().zip(&patch))
                        {
                            *dwv += g * *xv;
                            *dpv += g * *wv;
                        }
                    }
                    // scatter the packed input gradient back to valid taps
                    for kt in 0..3usize {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let tap = (kt * 3 + ky) * 3 + kx;
                                if valid & (1 << tap) == 0 {
                                    continue;
                                }
                                let it = (tt + kt - 1) as usize;
                                let iy = (y + ky - 1) as usize;
                                let ix = (xx + kx - 1) as usize;
                                let in_base = ((it * h + iy) * w + ix) * cin;
                                for (dst, src) in dx[in_base..in_base + cin]
                                    .iter_mut()
                                    .zip(&dpatch[tap * cin..(tap + 1) * cin])
                                {
                                    *dst += *src;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(shape, dx).expect("dx shape")
    }
}

/// Per-pixel linear map (1x1 convolution) over [..., Cin] -> [..., Cout].
#[derive(Debug, Clone)]
pub struct Conv1x1<S: Scalar> {
    /// [cout, cin]
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub cin: usize,
    pub cout: usize,
}

impl<S: Scalar> Conv1x1<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut StreamRng) -> Self {
        Conv1x1 {
            w: uniform_init(&[cout, cin], cin, rng),
            b: Tensor::zeros(&[cout]),
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if *shape.last().unwrap_or(&0) != self.cin {
            return Err(Error::shape(format!(
                "conv1x1 expects trailing channel {}, got {:?}",
                self.cin, shape
            )));
        }
        let pixels = x.len() / self.cin;
        let mut out = Vec::with_capacity(pixels * self.cout);
        let xd = x.data();
        let wd = self.w.data();
        let bd = self.b.data();
        for p in 0..pixels {
            let xin = &xd[p * self.cin..(p + 1) * self.cin];
            for o in 0..self.cout {
                let wrow = &wd[o * self.cin..(o + 1) * self.cin];
                let mut acc = bd[o];
                for (wi, xi) in wrow.iter().zip(xin) {
                    acc += *wi * *xi;
                }
                out.push(acc);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.cout;
        Tensor::from_vec(&out_shape, out)
    }

    pub fn backward(
        &self,
        x: &Tensor<S>,
        dout: &Tensor<S>,
        dw: &mut Tensor<S>,
        db: &mut Tensor<S>,
    ) -> Tensor<S> {
        let pixels = x.len() / self.cin;
        let xd = x.data();
        let dod = dout.data();
        let wd = self.w.data();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let mut dx = vec![S::zero(); xd.len()];
        for p in 0..pixels {
            let xin = &xd[p * self.cin..(p + 1) * self.cin];
            let dxp = &mut dx[p * self.cin..(p + 1) * self.cin];
            for o in 0..self.cout {
                let g = dod[p * self.cout + o];
                if g == S::zero() {
                    continue;
                }
                dbd[o] += g;
                let wrow = &wd[o * self.cin..(o + 1) * self.cin];
                let dwrow = &mut dwd[o * self.cin..(o + 1) * self.cin];
                for ci in 0..self.cin {
                    dwrow[ci] += g * xin[ci];
                    dxp[ci] += g * wrow[ci];
                }
            }
        }
        Tensor::from_vec(x.shape(), dx).expect("dx shape")
    }
}

/// Fully connected layer over flat vectors.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    /// [out, in]
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub n_in: usize,
    pub n_out: usize,
}

impl<S: Scalar> Linear<S> {
    pub fn new(n_in: usize, n_out: usize, rng: &mut StreamRng) -> Self {
        Linear {
            w: uniform_init(&[n_out, n_in], n_in, rng),
            b: Tensor::zeros(&[n_out]),
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.n_in);
        let wd = self.w.data();
        let bd = self.b.data();
        (0..self.n_out)
            .map(|o| {
                let wrow = &wd[o * self.n_in..(o + 1) * self.n_in];
                let mut acc = bd[o];
                for (wi, xi) in wrow.iter().zip(x) {
                    acc += *wi * *xi;
                }
                acc
            })
            .collect()
    }

    pub fn backward(
        &self,
        x: &[S],
        dout: &[S],
        dw: &mut Tensor<S>,
        db: &mut Tensor<S>,
    ) -> Vec<S> {
        let wd = self.w.data();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let mut dx = vec![S::zero(); self.n_in];
        for o in 0..self.n_out {
            let g = dout[o];
            dbd[o] += g;
            let wrow = &wd[o * self.n_in..(o + 1) * self.n_in];
            let dwrow = &mut dwd[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                dwrow[i] += g * x[i];
                dx[i] += g * wrow[i];
            }
        }
        dx
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dout: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&xv, &g)| if xv > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu grad shape")
}

pub fn sigmoid_val<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(sigmoid_val)
}

/// dx from dout and the forward *output* y = sigmoid(x).
pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, dout: &Tensor<S>) -> Tensor<S> {
    let data = y
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&yv, &g)| g * yv * (S::one() - yv))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("sigmoid grad shape")
}

/// 2x2 stride-2 spatial average pool on [T, H, W, C].
pub fn avg_pool_spatial<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let quarter = S::from_f64(0.25);
    let mut out = vec![S::zero(); t * oh * ow * c];
    for tt in 0..t {
        for y in 0..oh {
            for xx in 0..ow {
                let obase = ((tt * oh + y) * ow + xx) * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let ibase = ((tt * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[obase + ch] += xd[ibase + ch] * quarter;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[t, oh, ow, c], out).expect("pool shape")
}

pub fn avg_pool_spatial_backward<S: Scalar>(in_shape: &[usize], dout: &Tensor<S>) -> Tensor<S> {
    let (t, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let dod = dout.data();
    let quarter = S::from_f64(0.25);
    let mut dx = vec![S::zero(); t * h * w * c];
    for tt in 0..t {
        for y in 0..oh {
            for xx in 0..ow {
                let obase = ((tt * oh + y) * ow + xx) * c;
                for dy in 0..2 {
                    for dx_ in 0..2 {
                        let ibase = ((tt * h + 2 * y + dy) * w + 2 * xx + dx_) * c;
                        for ch in 0..c {
                            dx[ibase + ch] += dod[obase + ch] * quarter;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[t, h, w, c], dx).expect("pool grad shape")
}

/// Mean over all non-channel axes (channel last) -> vector of length C.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let c = *x.shape().last().expect("non-empty shape");
    let positions = x.len() / c;
    let mut out = vec![0.0f64; c];
    for px in x.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v.to_f64_();
        }
    }
    out.into_iter()
        .map(|v| S::from_f64(v / positions as f64))
        .collect()
}

pub fn global_avg_pool_backward<S: Scalar>(in_shape: &[usize], dout: &[S]) -> Tensor<S> {
    let c = *in_shape.last().unwrap();
    let positions: usize = in_shape.iter().product::<usize>() / c;
    let inv = S::from_f64(1.0 / positions as f64);
    let mut dx = Vec::with_capacity(positions * c);
    for _ in 0..positions {
        for g in dout {
            dx.push(*g * inv);
        }
    }
    Tensor::from_vec(in_shape, dx).expect("gap grad shape")
}

/// Scales each channel of a channel-last tensor; used for removal masks
/// and dropout.
pub fn scale_channels<S: Scalar>(x: &Tensor<S>, scale: &[S]) -> Tensor<S> {
    let c = *x.shape().last().unwrap();
    debug_assert_eq!(c, scale.len());
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|px| px.iter().zip(scale).map(|(&v, &s)| v * s))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("scale shape")
}
