//! A hand-built 16-channel network with known ground truth: four channels
//! compute static (color-contrast) functionals, four compute dynamic
//! (flow-direction) functionals, four sum one static and one dynamic
//! part, and four are dead. Because every channel's factor membership is
//! known by construction, the network serves as a recovery target for the
//! probe and an ablation target for removal experiments.
//!
//! The functionals are chosen so each class sits firmly on its side of
//! the lambda = 0.5 boundary:
//! - color contrasts are exactly invariant under frame shuffling (the
//!   pixel multiset is preserved), and decorrelate across style pairs;
//! - mean-flow direction features are exactly shared by restyled pairs
//!   (flow is computed pre-style) and sign-scramble under shuffling;
//! - the joint channels use squared flow magnitude as the dynamic part,
//!   which persists under shuffling (object size and speed survive), so
//!   the static-pair correlation stays high alongside the dynamic one.

use crate::error::{Error, Result};
use crate::probe::ActivationSource;
use crate::scalar::Scalar;
use crate::video::{flow_analog, Video, DIRECTION_BINS};

pub const PLANTED_LAYER: &str = "planted";
pub const CHANNELS: usize = 16;

/// Channel roles, in channel order.
pub const STATIC_CHANNELS: [usize; 4] = [0, 1, 2, 3];
pub const DYNAMIC_CHANNELS: [usize; 4] = [4, 5, 6, 7];
pub const JOINT_CHANNELS: [usize; 4] = [8, 9, 10, 11];
pub const DEAD_CHANNELS: [usize; 4] = [12, 13, 14, 15];

// Empirical standard deviations over the generator distribution, used to
// mix the joint channels at a controlled static:dynamic ratio.
const STATIC_SCALE: [f64; 4] = [0.044, 0.066, 0.053, 0.052];
const SQMAG_SCALE: f64 = 0.0020;
const JOINT_DYNAMIC_RATIO: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct PlantedNet {
    /// Channels forced to zero (removal mask analog).
    pub masked: [bool; CHANNELS],
}

impl Default for PlantedNet {
    fn default() -> Self {
        Self::new()
    }
}

impl PlantedNet {
    pub fn new() -> Self {
        PlantedNet {
            masked: [false; CHANNELS],
        }
    }

    pub fn with_masked(channels: &[usize]) -> Self {
        let mut net = Self::new();
        for &c in channels {
            net.masked[c] = true;
        }
        net
    }

    fn raw_features<S: Scalar>(&self, video: &Video<S>) -> [f64; CHANNELS] {
        let rgb = video.rgb.data();
        let n_px = rgb.len() / 3;
        let mut mean = [0.0f64; 3];
        for px in rgb.chunks_exact(3) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v.to_f64_();
            }
        }
        for m in mean.iter_mut() {
            *m /= n_px as f64;
        }
        let median_rg = {
            let mut r: Vec<f64> = rgb.chunks_exact(3).map(|px| px[0].to_f64_()).collect();
            let mut g: Vec<f64> = rgb.chunks_exact(3).map(|px| px[1].to_f64_()).collect();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r[n_px / 2] - g[n_px / 2]
        };
        let s = [
            mean[0] - mean[1],
            mean[0] - mean[2],
            mean[2] - 0.5 * (mean[0] + mean[1]),
            median_rg,
        ];

        let flow_owned;
        let flow = match &video.flow {
            Some(f) => f,
            None => {
                flow_owned = flow_analog(&video.rgb);
                &flow_owned
            }
        };
        let fd = flow.data();
        let n_fpx = fd.len() / 2;
        let mut mu = 0.0f64;
        let mut mv = 0.0f64;
        let mut sqmag = 0.0f64;
        for uv in fd.chunks_exact(2) {
            let (u, w) = (uv[0].to_f64_(), uv[1].to_f64_());
            mu += u;
            mv += w;
            sqmag += u * u + w * w;
        }
        mu /= n_fpx as f64;
        mv /= n_fpx as f64;
        sqmag /= n_fpx as f64;
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let d = [mu, mv, (mu + mv) * inv_sqrt2, (mu - mv) * inv_sqrt2];

        let mut out = [0.0f64; CHANNELS];
        out[..4].copy_from_slice(&s);
        out[4..8].copy_from_slice(&d);
        for k in 0..4 {
            out[8 + k] =
                s[k] / STATIC_SCALE[k] + JOINT_DYNAMIC_RATIO * sqmag / SQMAG_SCALE;
        }
        // channels 12..16 stay dead
        out
    }

    pub fn features<S: Scalar>(&self, video: &Video<S>) -> [f64; CHANNELS] {
        let mut f = self.raw_features(video);
        for (v, &masked) in f.iter_mut().zip(&self.masked) {
            if masked {
                *v = 0.0;
            }
        }
        f
    }

    /// Direction-bin prediction from the mean-flow channels (4 and 5).
    pub fn predict_direction<S: Scalar>(&self, video: &Video<S>) -> usize {
        let f = self.features(video);
        let angle = f[5].atan2(f[4]);
        let step = std::f64::consts::TAU / DIRECTION_BINS as f64;
        ((angle / step).round().rem_euclid(DIRECTION_BINS as f64)) as usize
    }

    /// Accuracy of direction prediction over labeled videos.
    pub fn direction_accuracy<S: Scalar>(&self, samples: &[(Video<S>, usize)]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .iter()
            .filter(|(v, label)| self.predict_direction(v) == *label)
            .count();
        correct as f64 / samples.len() as f64
    }
}

impl<S: Scalar> ActivationSource<S> for PlantedNet {
    fn source_layers(&self) -> Vec<String> {
        vec![PLANTED_LAYER.to_string()]
    }

    fn pooled(&self, videos: &[Video<S>], layer: &str) -> Result<Vec<Vec<S>>> {
        if layer != PLANTED_LAYER {
            return Err(Error::invalid(format!(
                "planted network has no layer '{layer}'"
            )));
        }
        Ok(videos
            .iter()
            .map(|v| self.features(v).iter().map(|&x| S::from_f64(x)).collect())
            .collect())
    }
}
