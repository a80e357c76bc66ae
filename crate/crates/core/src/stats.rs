//! Streaming correlation, softmax and pooling kernels.
//!
//! Accumulation is always done in f64, even when tensors are f32:
//! covariance over thousands of samples needs the headroom.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-pass bivariate moment accumulator (Welford form).
///
/// Update order is fixed by the caller; for a fixed input order the result
/// is deterministic. Finalizes to a population Pearson correlation in
/// [-1, 1], or 0 when either variance is degenerate.
#[derive(Debug, Clone, Default)]
pub struct CorrAccumulator {
    count: u64,
    mean_a: f64,
    mean_b: f64,
    m2_a: f64,
    m2_b: f64,
    co_moment: f64,
}

impl CorrAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: f64, b: f64) {
        self.count += 1;
        let n = self.count as f64;
        let da = a - self.mean_a;
        let db = b - self.mean_b;
        // symmetric co-moment form: swapping the inputs swaps a float
        // multiplication, so pearson(a, b) == pearson(b, a) bit-for-bit
        self.co_moment += da * db * ((n - 1.0) / n);
        self.mean_a += da / n;
        self.mean_b += db / n;
        self.m2_a += da * (a - self.mean_a);
        self.m2_b += db * (b - self.mean_b);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Population Pearson correlation; degenerate variance maps to 0 so
    /// dead channels land in the residual class instead of producing NaN.
    pub fn correlation(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let denom = (self.m2_a * self.m2_b).sqrt();
        if denom <= 0.0 || !denom.is_finite() {
            return 0.0;
        }
        (self.co_moment / denom).clamp(-1.0, 1.0)
    }
}

/// Population Pearson correlation of two equal-length slices.
pub fn pearson<S: Scalar>(a: &[S], b: &[S]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "pearson: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("pearson: need at least 2 samples"));
    }
    let mut acc = CorrAccumulator::new();
    for (&x, &y) in a.iter().zip(b) {
        acc.push(x.to_f64_(), y.to_f64_());
    }
    Ok(acc.correlation())
}

/// Shift-invariant softmax. Output entries are positive and sum to 1.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax: empty input"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax: non-finite input"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Mean over every non-channel axis; returns one value per channel.
pub fn gap_pool<S: Scalar>(t: &Tensor<S>, channel_axis: usize) -> Result<Vec<S>> {
    let shape = t.shape();
    if channel_axis >= shape.len() {
        return Err(Error::shape(format!(
            "gap_pool: channel axis {} out of range for shape {:?}",
            channel_axis, shape
        )));
    }
    let channels = shape[channel_axis];
    if t.is_empty() {
        return Err(Error::shape("gap_pool: empty tensor"));
    }
    // Stride walk: inner = product of extents after the channel axis.
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let outer: usize = shape[..channel_axis].iter().product();
    let per_channel = (outer * inner) as f64;
    let mut sums = vec![0.0f64; channels];
    let data = t.data();
    for o in 0..outer {
        let base = o * channels * inner;
        for (c, sum) in sums.iter_mut().enumerate() {
            let row = base + c * inner;
            for v in &data[row..row + inner] {
                *sum += v.to_f64_();
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| S::from_f64(s / per_channel))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn pearson_perfect_positive() {
        let r = pearson(&[1.0f64, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_perfect_negative() {
        let r = pearson(&[1.0f64, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_hand_evaluated_case() {
        // cov/(sigma_a sigma_b): co-moment 1.0, variances 1.25 each -> 0.8
        let r = pearson(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_is_zero() {
        let r = pearson(&[5.0f64, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn pearson_rejects_bad_lengths() {
        assert!(pearson(&[1.0f64], &[1.0]).is_err());
        assert!(pearson(&[1.0f64, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_is_symmetric() {
        let mut rng = StreamRng::new(1, "sym");
        let a: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        assert_eq!(pearson(&a, &b).unwrap(), pearson(&b, &a).unwrap());
    }

    #[test]
    fn streaming_matches_batch_pearson() {
        let mut rng = StreamRng::new(2, "stream");
        let a: Vec<f64> = (0..10_000).map(|_| rng.range_f64(-3.0, 3.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|&x| 0.7 * x + 0.3 * rng.range_f64(-1.0, 1.0))
            .collect();
        let mut acc = CorrAccumulator::new();
        for (&x, &y) in a.iter().zip(&b) {
            acc.push(x, y);
        }
        // Two-pass reference.
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(&b).map(|(&x, &y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|&x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|&y| (y - mb) * (y - mb)).sum();
        let reference = cov / (va * vb).sqrt();
        assert!((acc.correlation() - reference).abs() < 1e-6);
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_case() {
        let p = softmax(&[0.8, 0.3, 1.0]).unwrap();
        let expect = [0.3536, 0.2145, 0.4319];
        for (got, want) in p.iter().zip(expect) {
            assert!((got - want).abs() < 5e-5, "{got} vs {want}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        for x in [-50.0, 0.0, 3.25, 90.0] {
            let p = softmax(&[x, x + 2.0f64.ln()]).unwrap();
            assert!((p[0] - 1.0 / 3.0).abs() < 1e-9);
            assert!((p[1] - 2.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn gap_pool_constant_tensor() {
        let t = Tensor::<f32>::full(&[2, 3, 3, 4], 2.5);
        let pooled = gap_pool(&t, 3).unwrap();
        assert_eq!(pooled.len(), 4);
        for v in pooled {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_pool_small_case() {
        // 2x1x1x2, channel 0 holds {0, 2} -> pooled 1.0
        let t = Tensor::<f32>::from_vec(&[2, 1, 1, 2], vec![0.0, 5.0, 2.0, 7.0]).unwrap();
        let pooled = gap_pool(&t, 3).unwrap();
        assert!((pooled[0] - 1.0).abs() < 1e-6);
        assert!((pooled[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn gap_pool_matches_brute_force() {
        let mut rng = StreamRng::new(3, "pool");
        let shape = [4usize, 4, 4, 3];
        let data: Vec<f32> = (0..shape.iter().product())
            .map(|_| rng.range_f64(-2.0, 2.0) as f32)
            .collect();
        let t = Tensor::from_vec(&shape, data).unwrap();
        let pooled = gap_pool(&t, 3).unwrap();
        // Brute-force nested-loop mean per channel.
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut count = 0u32;
            for a in 0..4 {
                for b in 0..4 {
                    for d in 0..4 {
                        sum += t.at(&[a, b, d, c]) as f64;
                        count += 1;
                    }
                }
            }
            let want = (sum / count as f64) as f32;
            assert!((pooled[c] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_pool_interior_channel_axis() {
        let t = Tensor::<f64>::from_vec(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        // channel axis 1: channel 0 holds {0,1,4,5}, channel 1 {2,3,6,7}
        let pooled = gap_pool(&t, 1).unwrap();
        assert!((pooled[0] - 2.5).abs() < 1e-12);
        assert!((pooled[1] - 4.5).abs() < 1e-12);
    }
}
