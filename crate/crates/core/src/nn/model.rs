//! Toy spatiotemporal networks covering the studied architecture axes:
//! single-stream 3D vs. two-stream 2D, cross-connection topology, and
//! fusion type. Forward and backward passes are hand-written; batches are
//! processed per sample in parallel with a sequential, index-ordered
//! gradient reduction so results never depend on thread schedule.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::fusion::{
    CcgChannelAttention, CcgChannelCache, CcgSpatialAttention, CcgSpatialCache, CrossCache,
    CrossConnect, CrossConnection, FusionKind, GatedChannelAttention, GatedChannelCache,
    GatedSpatialAttention, GatedSpatialCache,
};
use crate::nn::layers::{
    avg_pool_spatial, avg_pool_spatial_backward, global_avg_pool, global_avg_pool_backward,
    relu, relu_backward, scale_channels, sigmoid_val, Conv1x1, Conv2d, Conv3d, Linear,
};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::Video;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamKind {
    SingleStream3D,
    TwoStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Classifier { classes: usize },
    Segmenter,
}

/// Everything needed to rebuild a network shape. The cross-connection and
/// fusion fields are only meaningful for the two-stream kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub kind: StreamKind,
    pub widths: [usize; 2],
    pub cross_connection: CrossConnection,
    pub fusion: FusionKind,
    pub head: Head,
    pub se_reduction: usize,
}

impl ArchitectureDescriptor {
    pub fn single(classes: usize) -> Self {
        ArchitectureDescriptor {
            kind: StreamKind::SingleStream3D,
            widths: [8, 16],
            cross_connection: CrossConnection::None,
            fusion: FusionKind::Gated,
            head: Head::Classifier { classes },
            se_reduction: 2,
        }
    }

    pub fn two_stream(
        cross_connection: CrossConnection,
        fusion: FusionKind,
        head: Head,
    ) -> Self {
        ArchitectureDescriptor {
            kind: StreamKind::TwoStream,
            widths: [8, 16],
            cross_connection,
            fusion,
            head,
            se_reduction: 2,
        }
    }
}

/// Ordered per-layer captures from one forward pass; one tensor per
/// sample per layer, pre-nonlinearity.
#[derive(Debug, Clone)]
pub struct LayerActivations<S: Scalar> {
    entries: Vec<(String, Vec<Tensor<S>>)>,
}

impl<S: Scalar> LayerActivations<S> {
    fn new() -> Self {
        LayerActivations {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, per_sample: Vec<Tensor<S>>) {
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate capture {name}"
        );
        self.entries.push((name.to_string(), per_sample));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[Tensor<S>]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
    }
}

/// Per-layer channel multipliers (removal masks, dropout scales).
pub type ChannelScales<S> = BTreeMap<String, Vec<S>>;

#[derive(Debug, Clone)]
pub enum Output<S: Scalar> {
    /// Per-sample class logits.
    Logits(Vec<Vec<S>>),
    /// Per-sample H x W mask logits.
    MaskLogits(Vec<Tensor<S>>),
}

impl<S: Scalar> Output<S> {
    pub fn logits(&self) -> &[Vec<S>] {
        match self {
            Output::Logits(l) => l,
            Output::MaskLogits(_) => panic!("expected class logits"),
        }
    }

    pub fn mask_logits(&self) -> &[Tensor<S>] {
        match self {
            Output::MaskLogits(m) => m,
            Output::Logits(_) => panic!("expected mask logits"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Targets<'a, S: Scalar> {
    Classes(&'a [usize]),
    Masks(&'a [Tensor<S>]),
}

#[derive(Debug, Clone)]
enum HeadNet<S: Scalar> {
    Classifier(Linear<S>),
    Segmenter(Conv1x1<S>),
}

#[derive(Debug, Clone)]
enum FusionNet<S: Scalar> {
    Gated {
        channel: GatedChannelAttention<S>,
        spatial: GatedSpatialAttention<S>,
    },
    Ccg {
        channel: CcgChannelAttention<S>,
        spatial: CcgSpatialAttention<S>,
    },
}

#[derive(Debug, Clone)]
struct SingleNet<S: Scalar> {
    conv1: Conv3d<S>,
    conv2: Conv3d<S>,
    head: HeadNet<S>,
}

#[derive(Debug, Clone)]
struct TwoNet<S: Scalar> {
    app1: Conv2d<S>,
    mot1: Conv2d<S>,
    cross: CrossConnect<S>,
    app2: Conv2d<S>,
    mot2: Conv2d<S>,
    fusion: FusionNet<S>,
    head: HeadNet<S>,
}

#[derive(Debug, Clone)]
enum Net<S: Scalar> {
    Single(SingleNet<S>),
    Two(TwoNet<S>),
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub descriptor: ArchitectureDescriptor,
    net: Net<S>,
    /// Persistent removal masks: layer name -> per-channel multiplier.
    pub masks: ChannelScales<S>,
}

pub const SINGLE_LAYERS: [&str; 2] = ["block1", "block2"];
pub const TWO_STREAM_LAYERS: [&str; 5] = [
    "app_block1",
    "mot_block1",
    "app_block2",
    "mot_block2",
    "fusion",
];

impl<S: Scalar> Model<S> {
    pub fn init(descriptor: ArchitectureDescriptor, rng: &StreamRng) -> Self {
        let [c1, c2] = descriptor.widths;
        let net = match descriptor.kind {
            StreamKind::SingleStream3D => Net::Single(SingleNet {
                conv1: Conv3d::new(3, c1, &mut rng.substream("conv1")),
                conv2: Conv3d::new(c1, c2, &mut rng.substream("conv2")),
                head: Self::make_head(&descriptor, c2, rng),
            }),
            StreamKind::TwoStream => Net::Two(TwoNet {
                app1: Conv2d::new(3, c1, &mut rng.substream("app1")),
                mot1: Conv2d::new(2, c1, &mut rng.substream("mot1")),
                cross: CrossConnect::new(
                    descriptor.cross_connection,
                    c1,
                    &mut rng.substream("cross"),
                ),
                app2: Conv2d::new(c1, c2, &mut rng.substream("app2")),
                mot2: Conv2d::new(c1, c2, &mut rng.substream("mot2")),
                fusion: match descriptor.fusion {
                    FusionKind::Gated => FusionNet::Gated {
                        channel: GatedChannelAttention::new(
                            c2,
                            descriptor.se_reduction,
                            &mut rng.substream("fusion_ch"),
                        ),
                        spatial: GatedSpatialAttention::new(2 * c2, &mut rng.substream("fusion_sp")),
                    },
                    FusionKind::ConvexCombinationGated => FusionNet::Ccg {
                        channel: CcgChannelAttention::new(
                            c2,
                            descriptor.se_reduction,
                            &mut rng.substream("fusion_ch"),
                        ),
                        spatial: CcgSpatialAttention::new(c2, &mut rng.substream("fusion_sp")),
                    },
                },
                head: Self::make_head(&descriptor, 2 * c2, rng),
            }),
        };
        Model {
            descriptor,
            net,
            masks: BTreeMap::new(),
        }
    }

    fn make_head(descriptor: &ArchitectureDescriptor, feat: usize, rng: &StreamRng) -> HeadNet<S> {
        match descriptor.head {
            Head::Classifier { classes } => {
                HeadNet::Classifier(Linear::new(feat, classes, &mut rng.substream("head")))
            }
            Head::Segmenter => {
                HeadNet::Segmenter(Conv1x1::new(feat, 1, &mut rng.substream("head")))
            }
        }
    }

    /// Probe layers, in forward order.
    pub fn probe_layers(&self) -> Vec<&'static str> {
        match self.descriptor.kind {
            StreamKind::SingleStream3D => SINGLE_LAYERS.to_vec(),
            StreamKind::TwoStream => TWO_STREAM_LAYERS.to_vec(),
        }
    }

    /// The layer dropout and removal default to: the last block before the
    /// classifier.
    pub fn final_block(&self) -> &'static str {
        match self.descriptor.kind {
            StreamKind::SingleStream3D => "block2",
            StreamKind::TwoStream => "fusion",
        }
    }

    pub fn layer_channels(&self, layer: &str) -> Result<usize> {
        let [c1, c2] = self.descriptor.widths;
        match (self.descriptor.kind, layer) {
            (StreamKind::SingleStream3D, "block1") => Ok(c1),
            (StreamKind::SingleStream3D, "block2") => Ok(c2),
            (StreamKind::TwoStream, "app_block1" | "mot_block1") => Ok(c1),
            (StreamKind::TwoStream, "app_block2" | "mot_block2") => Ok(c2),
            (StreamKind::TwoStream, "fusion") => Ok(2 * c2),
            _ => Err(Error::invalid(format!("unknown probe layer '{layer}'"))),
        }
    }

    /// Parameter tensors in declaration order (checkpoint blob order).
    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        match &self.net {
            Net::Single(n) => {
                out.extend([&n.conv1.w, &n.conv1.b, &n.conv2.w, &n.conv2.b]);
                match &n.head {
                    HeadNet::Classifier(l) => out.extend([&l.w, &l.b]),
                    HeadNet::Segmenter(c) => out.extend([&c.w, &c.b]),
                }
            }
            Net::Two(n) => {
                out.extend([&n.app1.w, &n.app1.b, &n.mot1.w, &n.mot1.b]);
                n.cross.collect_params(&mut out);
                out.extend([&n.app2.w, &n.app2.b, &n.mot2.w, &n.mot2.b]);
                match &n.fusion {
                    FusionNet::Gated { channel, spatial } => {
                        out.extend(channel.se.param_tensors());
                        out.extend([&spatial.conv.w, &spatial.conv.b]);
                    }
                    FusionNet::Ccg { channel, spatial } => {
                        out.extend(channel.se.param_tensors());
                        out.extend([&spatial.conv.w, &spatial.conv.b]);
                    }
                }
                match &n.head {
                    HeadNet::Classifier(l) => out.extend([&l.w, &l.b]),
                    HeadNet::Segmenter(c) => out.extend([&c.w, &c.b]),
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        match &mut self.net {
            Net::Single(n) => {
                out.extend([&mut n.conv1.w, &mut n.conv1.b, &mut n.conv2.w, &mut n.conv2.b]);
                match &mut n.head {
                    HeadNet::Classifier(l) => out.extend([&mut l.w, &mut l.b]),
                    HeadNet::Segmenter(c) => out.extend([&mut c.w, &mut c.b]),
                }
            }
            Net::Two(n) => {
                out.extend([&mut n.app1.w, &mut n.app1.b, &mut n.mot1.w, &mut n.mot1.b]);
                n.cross.collect_params_mut(&mut out);
                out.extend([&mut n.app2.w, &mut n.app2.b, &mut n.mot2.w, &mut n.mot2.b]);
                match &mut n.fusion {
                    FusionNet::Gated { channel, spatial } => {
                        out.extend(channel.se.param_tensors_mut());
                        out.extend([&mut spatial.conv.w, &mut spatial.conv.b]);
                    }
                    FusionNet::Ccg { channel, spatial } => {
                        out.extend(channel.se.param_tensors_mut());
                        out.extend([&mut spatial.conv.w, &mut spatial.conv.b]);
                    }
                }
                match &mut n.head {
                    HeadNet::Classifier(l) => out.extend([&mut l.w, &mut l.b]),
                    HeadNet::Segmenter(c) => out.extend([&mut c.w, &mut c.b]),
                }
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<Tensor<S>> {
        self.params()
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect()
    }

    fn effective_scale(&self, layer: &str, extra: Option<&ChannelScales<S>>) -> Option<Vec<S>> {
        let persistent = self.masks.get(layer);
        let transient = extra.and_then(|e| e.get(layer));
        match (persistent, transient) {
            (None, None) => None,
            (Some(p), None) => Some(p.clone()),
            (None, Some(t)) => Some(t.clone()),
            (Some(p), Some(t)) => Some(p.iter().zip(t).map(|(&a, &b)| a * b).collect()),
        }
    }

    fn maybe_scale(&self, x: Tensor<S>, layer: &str, extra: Option<&ChannelScales<S>>) -> Tensor<S> {
        match self.effective_scale(layer, extra) {
            Some(scale) => scale_channels(&x, &scale),
            None => x,
        }
    }

    pub fn forward(
        &self,
        videos: &[Video<S>],
        capture: bool,
    ) -> Result<(Output<S>, Option<LayerActivations<S>>)> {
        self.forward_scaled(videos, capture, None)
    }

    /// Forward with transient per-layer channel scales (dropout).
    pub fn forward_scaled(
        &self,
        videos: &[Video<S>],
        capture: bool,
        extra: Option<&ChannelScales<S>>,
    ) -> Result<(Output<S>, Option<LayerActivations<S>>)> {
        let per_sample: Result<Vec<SampleRun<S>>> = videos
            .par_iter()
            .map(|v| self.run_sample(v, extra))
            .collect();
        let per_sample = per_sample?;
        let output = self.stack_outputs(&per_sample);
        let activations = capture.then(|| self.stack_captures(per_sample));
        Ok((output, activations))
    }

    fn stack_outputs(&self, runs: &[SampleRun<S>]) -> Output<S> {
        match &self.descriptor.head {
            Head::Classifier { .. } => {
                Output::Logits(runs.iter().map(|r| r.logits.clone()).collect())
            }
            Head::Segmenter => {
                Output::MaskLogits(runs.iter().map(|r| r.mask_logits.clone().unwrap()).collect())
            }
        }
    }

    fn stack_captures(&self, runs: Vec<SampleRun<S>>) -> LayerActivations<S> {
        let mut acts = LayerActivations::new();
        let names = self.probe_layers();
        let mut per_layer: Vec<Vec<Tensor<S>>> = names.iter().map(|_| Vec::new()).collect();
        for run in runs {
            debug_assert_eq!(run.captures.len(), names.len());
            for (slot, tensor) in per_layer.iter_mut().zip(run.captures) {
                slot.push(tensor);
            }
        }
        for (name, tensors) in names.iter().zip(per_layer) {
            acts.push(name, tensors);
        }
        acts
    }

    /// Mean loss over the batch without gradients.
    pub fn loss(&self, videos: &[Video<S>], targets: &Targets<S>) -> Result<f64> {
        let (output, _) = self.forward(videos, false)?;
        batch_loss(&output, targets)
    }

    /// Mean-loss gradients for every parameter, in declaration order.
    /// Per-sample contributions are computed in parallel and reduced in
    /// sample order.
    pub fn backward(
        &self,
        videos: &[Video<S>],
        targets: &Targets<S>,
        extra: Option<&ChannelScales<S>>,
    ) -> Result<(f64, Vec<Tensor<S>>)> {
        validate_targets(videos.len(), targets, &self.descriptor)?;
        let inv_batch = 1.0 / videos.len() as f64;
        let per_sample: Result<Vec<(f64, Vec<Tensor<S>>)>> = videos
            .par_iter()
            .enumerate()
            .map(|(i, v)| {
                let run = self.run_sample(v, extra)?;
                let (loss, dout) = sample_loss_grad(&run, targets, i)?;
                let grads = self.backward_sample(&run, dout, extra);
                Ok((loss, grads))
            })
            .collect();
        let per_sample = per_sample?;
        let mut total_loss = 0.0;
        let mut grads = self.zero_grads();
        for (loss, sample_grads) in per_sample {
            total_loss += loss;
            for (acc, g) in grads.iter_mut().zip(sample_grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b * S::from_f64(inv_batch);
                }
            }
        }
        Ok((total_loss * inv_batch, grads))
    }

    fn key_frame_slices(&self, video: &Video<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let t = video.frames();
        let key = t / 2;
        let (h, w) = (video.height(), video.width());
        let rgb_frame_len = h * w * 3;
        let rgb = Tensor::from_vec(
            &[h, w, 3],
            video.rgb.data()[key * rgb_frame_len..(key + 1) * rgb_frame_len].to_vec(),
        )?;
        let flow = video.flow.as_ref().ok_or_else(|| {
            Error::invalid("two-stream model requires a flow analog on every video")
        })?;
        let flow_frame_len = h * w * 2;
        let flow = Tensor::from_vec(
            &[h, w, 2],
            flow.data()[key * flow_frame_len..(key + 1) * flow_frame_len].to_vec(),
        )?;
        Ok((rgb, flow))
    }

    fn run_sample(&self, video: &Video<S>, extra: Option<&ChannelScales<S>>) -> Result<SampleRun<S>> {
        match &self.net {
            Net::Single(n) => self.run_single(n, video, extra),
            Net::Two(n) => self.run_two(n, video, extra),
        }
    }

    fn run_single(
        &self,
        n: &SingleNet<S>,
        video: &Video<S>,
        extra: Option<&ChannelScales<S>>,
    ) -> Result<SampleRun<S>> {
        // segmentation predicts at input resolution, so pooling is only
        // applied on the classification path
        let pool = matches!(self.descriptor.head, Head::Classifier { .. });
        let x = video.rgb.clone();
        let z1 = n.conv1.forward(&x)?;
        let r1 = self.maybe_scale(relu(&z1), "block1", extra);
        let p1 = if pool { avg_pool_spatial(&r1) } else { r1.clone() };
        let z2 = n.conv2.forward(&p1)?;
        let r2 = self.maybe_scale(relu(&z2), "block2", extra);
        let p2 = if pool { avg_pool_spatial(&r2) } else { r2.clone() };
        let captures = vec![z1.clone(), z2.clone()];
        let (head_cache, logits, mask_logits) = self.run_head(&n.head, &p2, video)?;
        Ok(SampleRun {
            cache: SampleCache::Single(SingleCache {
                x,
                z1,
                r1,
                p1,
                z2,
                r2,
                pooled: pool,
            }),
            head_cache,
            captures,
            logits,
            mask_logits,
        })
    }

    fn run_two(
        &self,
        n: &TwoNet<S>,
        video: &Video<S>,
        extra: Option<&ChannelScales<S>>,
    ) -> Result<SampleRun<S>> {
        let (rgb, flow) = self.key_frame_slices(video)?;
        let za1 = n.app1.forward(&rgb)?;
        let zm1 = n.mot1.forward(&flow)?;
        let ra1 = self.maybe_scale(relu(&za1), "app_block1", extra);
        let rm1 = self.maybe_scale(relu(&zm1), "mot_block1", extra);
        let (ca, cm, cross_cache) = n.cross.forward(&ra1, &rm1)?;
        let za2 = n.app2.forward(&ca)?;
        let zm2 = n.mot2.forward(&cm)?;
        let ra2 = self.maybe_scale(relu(&za2), "app_block2", extra);
        let rm2 = self.maybe_scale(relu(&zm2), "mot_block2", extra);
        let (fused, fusion_cache) = match &n.fusion {
            FusionNet::Gated { channel, spatial } => {
                let (z, _, ch_cache) = channel.forward(&ra2, &rm2)?;
                let (out, _, sp_cache) = spatial.forward(&z)?;
                (out, FusionCache::Gated { ch_cache, sp_cache })
            }
            FusionNet::Ccg { channel, spatial } => {
                let (za, zm, _, ch_cache) = channel.forward(&ra2, &rm2)?;
                let (out, _, sp_cache) = spatial.forward(&za, &zm)?;
                (out, FusionCache::Ccg { ch_cache, sp_cache })
            }
        };
        let fused_scaled = self.maybe_scale(fused.clone(), "fusion", extra);
        let captures = vec![za1.clone(), zm1.clone(), za2.clone(), zm2.clone(), fused.clone()];
        let (head_cache, logits, mask_logits) = self.run_head(&n.head, &fused_scaled, video)?;
        Ok(SampleRun {
            cache: SampleCache::Two(Box::new(TwoCache {
                rgb,
                flow,
                za1,
                zm1,
                cross_cache,
                ca,
                cm,
                za2,
                zm2,
                fusion_cache,
            })),
            head_cache,
            captures,
            logits,
            mask_logits,
        })
    }

    fn run_head(
        &self,
        head: &HeadNet<S>,
        features: &Tensor<S>,
        video: &Video<S>,
    ) -> Result<(HeadCache<S>, Vec<S>, Option<Tensor<S>>)> {
        match head {
            HeadNet::Classifier(linear) => {
                let pooled = global_avg_pool(features);
                let logits = linear.forward(&pooled);
                Ok((
                    HeadCache::Classifier {
                        features_shape: features.shape().to_vec(),
                        pooled,
                    },
                    logits,
                    None,
                ))
            }
            HeadNet::Segmenter(conv) => {
                // predict the key-frame mask from the key-frame feature
                let feat2d = if features.rank() == 4 {
                    let key = video.frames() / 2;
                    let shape = features.shape();
                    let frame_len = shape[1] * shape[2] * shape[3];
                    Tensor::from_vec(
                        &[shape[1], shape[2], shape[3]],
                        features.data()[key * frame_len..(key + 1) * frame_len].to_vec(),
                    )?
                } else {
                    features.clone()
                };
                let logits_map = conv.forward(&feat2d)?;
                let shape = logits_map.shape();
                let mask =
                    Tensor::from_vec(&[shape[0], shape[1]], logits_map.data().to_vec())?;
                Ok((
                    HeadCache::Segmenter {
                        feat2d,
                        full_shape: features.shape().to_vec(),
                        key: video.frames() / 2,
                    },
                    Vec::new(),
                    Some(mask),
                ))
            }
        }
    }

    fn backward_sample(
        &self,
        run: &SampleRun<S>,
        dout: HeadGrad<S>,
        extra: Option<&ChannelScales<S>>,
    ) -> Vec<Tensor<S>> {
        let mut grads = self.zero_grads();
        match (&self.net, &run.cache) {
            (Net::Single(n), SampleCache::Single(c)) => {
                self.backward_single(n, c, run, dout, extra, &mut grads)
            }
            (Net::Two(n), SampleCache::Two(c)) => {
                self.backward_two(n, c, run, dout, extra, &mut grads)
            }
            _ => unreachable!("cache kind matches net kind"),
        }
        grads
    }

    fn head_backward(
        &self,
        head: &HeadNet<S>,
        head_cache: &HeadCache<S>,
        dout: HeadGrad<S>,
        grads: &mut [Tensor<S>],
    ) -> Tensor<S> {
        match (head, head_cache, dout) {
            (
                HeadNet::Classifier(linear),
                HeadCache::Classifier {
                    features_shape,
                    pooled,
                },
                HeadGrad::Logits(dlogits),
            ) => {
                let n = grads.len();
                let (gw, gb) = grads[n - 2..].split_at_mut(1);
                let dpooled = linear.backward(pooled, &dlogits, &mut gw[0], &mut gb[0]);
                global_avg_pool_backward(features_shape, &dpooled)
            }
            (
                HeadNet::Segmenter(conv),
                HeadCache::Segmenter {
                    feat2d,
                    full_shape,
                    key,
                },
                HeadGrad::Mask(dmask),
            ) => {
                let n = grads.len();
                let dlogits_map =
                    Tensor::from_vec(&[dmask.shape()[0], dmask.shape()[1], 1], dmask.into_data())
                        .expect("dmask shape");
                let (gw, gb) = grads[n - 2..].split_at_mut(1);
                let dfeat2d = conv.backward(feat2d, &dlogits_map, &mut gw[0], &mut gb[0]);
                if full_shape.len() == 4 {
                    // scatter back into the key frame of the 4D feature
                    let mut dfull = Tensor::zeros(full_shape);
                    let frame_len: usize = full_shape[1..].iter().product();
                    dfull.data_mut()[key * frame_len..(key + 1) * frame_len]
                        .copy_from_slice(dfeat2d.data());
                    dfull
                } else {
                    dfeat2d
                }
            }
            _ => unreachable!("head grad kind matches head"),
        }
    }

    fn scale_backward(
        &self,
        dout: Tensor<S>,
        layer: &str,
        extra: Option<&ChannelScales<S>>,
    ) -> Tensor<S> {
        match self.effective_scale(layer, extra) {
            Some(scale) => scale_channels(&dout, &scale),
            None => dout,
        }
    }

    fn backward_single(
        &self,
        n: &SingleNet<S>,
        c: &SingleCache<S>,
        run: &SampleRun<S>,
        dout: HeadGrad<S>,
        extra: Option<&ChannelScales<S>>,
        grads: &mut Vec<Tensor<S>>,
    ) {
        let dp2 = self.head_backward(&n.head, &run.head_cache, dout, grads);
        let dr2 = if c.pooled {
            avg_pool_spatial_backward(c.r2.shape(), &dp2)
        } else {
            dp2
        };
        let dr2 = self.scale_backward(dr2, "block2", extra);
        let dz2 = relu_backward(&c.z2, &dr2);
        let dp1 = {
            let (left, right) = grads.split_at_mut(3);
            n.conv2.backward(&c.p1, &dz2, &mut left[2], &mut right[0])
        };
        let dr1 = if c.pooled {
            avg_pool_spatial_backward(c.r1.shape(), &dp1)
        } else {
            dp1
        };
        let dr1 = self.scale_backward(dr1, "block1", extra);
        let dz1 = relu_backward(&c.z1, &dr1);
        let (left, right) = grads.split_at_mut(1);
        let _ = n.conv1.backward(&c.x, &dz1, &mut left[0], &mut right[0]);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_two(
        &self,
        n: &TwoNet<S>,
        c: &TwoCache<S>,
        run: &SampleRun<S>,
        dout: HeadGrad<S>,
        extra: Option<&ChannelScales<S>>,
        grads: &mut Vec<Tensor<S>>,
    ) {
        let dfused_scaled = self.head_backward(&n.head, &run.head_cache, dout, grads);
        let dfused = self.scale_backward(dfused_scaled, "fusion", extra);

        // parameter slice offsets, mirroring params() declaration order
        let cross_n = n.cross.grad_count();
        let fusion_start = 4 + cross_n + 4;
        let (dra2, drm2) = match (&n.fusion, &c.fusion_cache) {
            (FusionNet::Gated { channel, spatial }, FusionCache::Gated { ch_cache, sp_cache }) => {
                let dz = spatial.backward(
                    sp_cache,
                    &dfused,
                    &mut grads[fusion_start + 4..fusion_start + 6],
                );
                channel.backward(ch_cache, &dz, &mut grads[fusion_start..fusion_start + 4])
            }
            (FusionNet::Ccg { channel, spatial }, FusionCache::Ccg { ch_cache, sp_cache }) => {
                let (dza, dzm) = spatial.backward(
                    sp_cache,
                    &dfused,
                    &mut grads[fusion_start + 4..fusion_start + 6],
                );
                channel.backward(
                    ch_cache,
                    &dza,
                    &dzm,
                    &mut grads[fusion_start..fusion_start + 4],
                )
            }
            _ => unreachable!(),
        };
        let dra2 = self.scale_backward(dra2, "app_block2", extra);
        let drm2 = self.scale_backward(drm2, "mot_block2", extra);
        let dza2 = relu_backward(&c.za2, &dra2);
        let dzm2 = relu_backward(&c.zm2, &drm2);

        let dca = {
            let (w, b) = grad_pair(grads, 4 + cross_n);
            n.app2.backward(&c.ca, &dza2, w, b)
        };
        let dcm = {
            let (w, b) = grad_pair(grads, 6 + cross_n);
            n.mot2.backward(&c.cm, &dzm2, w, b)
        };

        let (dra1, drm1) = n
            .cross
            .backward(&c.cross_cache, &dca, &dcm, &mut grads[4..4 + cross_n]);
        let dra1 = self.scale_backward(dra1, "app_block1", extra);
        let drm1 = self.scale_backward(drm1, "mot_block1", extra);
        let dza1 = relu_backward(&c.za1, &dra1);
        let dzm1 = relu_backward(&c.zm1, &drm1);

        let (w, b) = grad_pair(grads, 0);
        let _ = n.app1.backward(&c.rgb, &dza1, w, b);
        let (w, b) = grad_pair(grads, 2);
        let _ = n.mot1.backward(&c.flow, &dzm1, w, b);
    }
}

fn grad_pair<S: Scalar>(grads: &mut [Tensor<S>], i: usize) -> (&mut Tensor<S>, &mut Tensor<S>) {
    let (a, b) = grads[i..i + 2].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

struct SampleRun<S: Scalar> {
    cache: SampleCache<S>,
    head_cache: HeadCache<S>,
    captures: Vec<Tensor<S>>,
    logits: Vec<S>,
    mask_logits: Option<Tensor<S>>,
}

enum SampleCache<S: Scalar> {
    Single(SingleCache<S>),
    Two(Box<TwoCache<S>>),
}

struct SingleCache<S: Scalar> {
    x: Tensor<S>,
    z1: Tensor<S>,
    r1: Tensor<S>,
    p1: Tensor<S>,
    z2: Tensor<S>,
    r2: Tensor<S>,
    pooled: bool,
}

struct TwoCache<S: Scalar> {
    rgb: Tensor<S>,
    flow: Tensor<S>,
    za1: Tensor<S>,
    zm1: Tensor<S>,
    cross_cache: CrossCache<S>,
    ca: Tensor<S>,
    cm: Tensor<S>,
    za2: Tensor<S>,
    zm2: Tensor<S>,
    fusion_cache: FusionCache<S>,
}

enum FusionCache<S: Scalar> {
    Gated {
        ch_cache: GatedChannelCache<S>,
        sp_cache: GatedSpatialCache<S>,
    },
    Ccg {
        ch_cache: CcgChannelCache<S>,
        sp_cache: CcgSpatialCache<S>,
    },
}

enum HeadCache<S: Scalar> {
    Classifier {
        features_shape: Vec<usize>,
        pooled: Vec<S>,
    },
    Segmenter {
        feat2d: Tensor<S>,
        full_shape: Vec<usize>,
        key: usize,
    },
}

enum HeadGrad<S: Scalar> {
    Logits(Vec<S>),
    Mask(Tensor<S>),
}

fn validate_targets<S: Scalar>(
    batch: usize,
    targets: &Targets<S>,
    descriptor: &ArchitectureDescriptor,
) -> Result<()> {
    match (targets, &descriptor.head) {
        (Targets::Classes(labels), Head::Classifier { classes }) => {
            if labels.len() != batch {
                return Err(Error::invalid("label count does not match batch size"));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            Ok(())
        }
        (Targets::Masks(masks), Head::Segmenter) => {
            if masks.len() != batch {
                return Err(Error::invalid("mask count does not match batch size"));
            }
            Ok(())
        }
        _ => Err(Error::invalid("target kind does not match model head")),
    }
}

/// Cross-entropy (classification) and mean per-pixel binary cross-entropy
/// (segmentation), both stabilized against large logits.
pub fn batch_loss<S: Scalar>(output: &Output<S>, targets: &Targets<S>) -> Result<f64> {
    match (output, targets) {
        (Output::Logits(logits), Targets::Classes(labels)) => {
            let mut total = 0.0;
            for (row, &label) in logits.iter().zip(*labels) {
                total += cross_entropy(row, label)?.0;
            }
            Ok(total / logits.len() as f64)
        }
        (Output::MaskLogits(maps), Targets::Masks(masks)) => {
            let mut total = 0.0;
            for (map, mask) in maps.iter().zip(*masks) {
                total += bce_with_logits(map, mask)?.0;
            }
            Ok(total / maps.len() as f64)
        }
        _ => Err(Error::invalid("output/target kind mismatch")),
    }
}

fn cross_entropy<S: Scalar>(logits: &[S], label: usize) -> Result<(f64, Vec<S>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let vals: Vec<f64> = logits.iter().map(|v| v.to_f64_()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let dlogits = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            S::from_f64(if i == label { p - 1.0 } else { p })
        })
        .collect();
    Ok((loss, dlogits))
}

fn bce_with_logits<S: Scalar>(map: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if map.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mask shape {:?} vs target {:?}",
            map.shape(),
            target.shape()
        )));
    }
    let n = map.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(map.len());
    for (&z, &y) in map.data().iter().zip(target.data()) {
        let zf = z.to_f64_();
        let yf = y.to_f64_();
        loss += zf.max(0.0) - zf * yf + (1.0 + (-zf.abs()).exp()).ln();
        let sig = 1.0 / (1.0 + (-zf).exp());
        grad.push(S::from_f64((sig - yf) / n));
    }
    Ok((loss / n, Tensor::from_vec(map.shape(), grad)?))
}

fn sample_loss_grad<S: Scalar>(
    run: &SampleRun<S>,
    targets: &Targets<S>,
    index: usize,
) -> Result<(f64, HeadGrad<S>)> {
    match targets {
        Targets::Classes(labels) => {
            let (loss, dlogits) = cross_entropy(&run.logits, labels[index])?;
            Ok((loss, HeadGrad::Logits(dlogits)))
        }
        Targets::Masks(masks) => {
            let map = run.mask_logits.as_ref().expect("segmenter output");
            let (loss, dmap) = bce_with_logits(map, &masks[index])?;
            Ok((loss, HeadGrad::Mask(dmap)))
        }
    }
}

/// Classification accuracy helper; argmax ties resolve to the lowest index.
pub fn accuracy<S: Scalar>(output: &Output<S>, labels: &[usize]) -> f64 {
    let logits = output.logits();
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Mean intersection-over-union of thresholded sigmoid masks.
pub fn mean_iou<S: Scalar>(output: &Output<S>, masks: &[Tensor<S>], threshold: f64) -> f64 {
    let maps = output.mask_logits();
    let mut total = 0.0;
    for (map, target) in maps.iter().zip(masks) {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&z, &y) in map.data().iter().zip(target.data()) {
            let pred = sigmoid_val(z).to_f64_() > threshold;
            let gt = y.to_f64_() > 0.5;
            inter += usize::from(pred && gt);
            union += usize::from(pred || gt);
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / maps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{render_with_flow, sample_spec, DynamicFactor, StaticFactor};

    fn test_video(seed: u64) -> Video<f64> {
        let mut rng = StreamRng::new(seed, "model-test");
        let spec = sample_spec(
            4,
            8,
            8,
            StaticFactor {
                palette: 0,
                texture: 0,
                shape: 0,
            },
            DynamicFactor {
                direction_bin: 1,
                speed: 1,
                flicker_period: 0,
            },
            0,
            false,
            &mut rng,
        );
        render_with_flow(&spec)
    }

    fn small_single(classes: usize) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            widths: [2, 3],
            ..ArchitectureDescriptor::single(classes)
        }
    }

    #[test]
    fn zero_input_zero_head_gives_equal_logits() {
        let rng = StreamRng::new(1, "m");
        let mut model: Model<f64> = Model::init(small_single(4), &rng);
        // zero the final linear weights, keep bias
        let n_params = model.params().len();
        for (i, p) in model.params_mut().into_iter().enumerate() {
            if i == n_params - 2 {
                for v in p.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut v = test_video(1);
        for x in v.rgb.data_mut() {
            *x = 0.0;
        }
        let (out, _) = model.forward(&[v], false).unwrap();
        let logits = &out.logits()[0];
        for w in logits.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let rng = StreamRng::new(2, "m");
        let model: Model<f64> = Model::init(small_single(3), &rng);
        let v = test_video(2);
        let (out, _) = model.forward(&[v.clone(), v], false).unwrap();
        assert_eq!(out.logits()[0], out.logits()[1]);
    }

    #[test]
    fn capture_lists_every_probe_layer_once() {
        let rng = StreamRng::new(3, "m");
        for descriptor in [
            small_single(3),
            ArchitectureDescriptor {
                widths: [2, 3],
                ..ArchitectureDescriptor::two_stream(
                    CrossConnection::Bidirectional,
                    FusionKind::ConvexCombinationGated,
                    Head::Classifier { classes: 3 },
                )
            },
        ] {
            let model: Model<f64> = Model::init(descriptor, &rng);
            let v = test_video(3);
            let (_, acts) = model.forward(&[v], true).unwrap();
            let acts = acts.unwrap();
            assert_eq!(acts.names(), model.probe_layers());
        }
    }

    #[test]
    fn scalar_network_forward_matches_hand_arithmetic() {
        // 1x1 spatial two-stream config: every feature map is one scalar
        // per channel, so the whole forward unrolls by hand.
        let rng = StreamRng::new(4, "m");
        let descriptor = ArchitectureDescriptor {
            widths: [1, 1],
            se_reduction: 1,
            ..ArchitectureDescriptor::two_stream(
                CrossConnection::None,
                FusionKind::Gated,
                Head::Classifier { classes: 2 },
            )
        };
        let model: Model<f64> = Model::init(descriptor, &rng);
        let mut v = test_video(4);
        // crop to 2 frames of 1x1 so the key frame (index 1) is a single pixel
        v.rgb = Tensor::from_vec(&[2, 1, 1, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        v.flow = Some(Tensor::from_vec(&[2, 1, 1, 2], vec![0.0, 0.0, 0.7, -0.2]).unwrap());
        let (out, _) = model.forward(&[v], false).unwrap();
        let got = &out.logits()[0];

        let params = model.params();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // app1 conv: 3x3 kernel, single pixel -> center tap only
        let a1w = params[0].data();
        let a1 = (a1w[4 * 3] * 0.4 + a1w[4 * 3 + 1] * 0.5 + a1w[4 * 3 + 2] * 0.6
            + params[1].data()[0])
            .max(0.0);
        let m1w = params[2].data();
        let m1 = (m1w[4 * 2] * 0.7 + m1w[4 * 2 + 1] * (-0.2) + params[3].data()[0]).max(0.0);
        let a2 = (params[4].data()[4] * a1 + params[5].data()[0]).max(0.0);
        let m2 = (params[6].data()[4] * m1 + params[7].data()[0]).max(0.0);
        // gated channel attention on the 2-vector (a2, m2)
        let w1 = params[8].data();
        let b1 = params[9].data();
        let h0 = (w1[0] * a2 + w1[1] * m2 + b1[0]).max(0.0);
        let h1 = (w1[2] * a2 + w1[3] * m2 + b1[1]).max(0.0);
        let w2 = params[10].data();
        let b2 = params[11].data();
        let g0 = sig(w2[0] * h0 + w2[1] * h1 + b2[0]);
        let g1 = sig(w2[2] * h0 + w2[3] * h1 + b2[1]);
        let z0 = g0 * a2;
        let z1 = g1 * m2;
        // gated spatial attention: 3x3 conv center tap on (z0, z1)
        let spw = params[12].data();
        let asp = sig(spw[4 * 2] * z0 + spw[4 * 2 + 1] * z1 + params[13].data()[0]);
        let f0 = asp * z0 + z0;
        let f1 = asp * z1 + z1;
        let hw = params[14].data();
        let hb = params[15].data();
        let want = [
            hw[0] * f0 + hw[1] * f1 + hb[0],
            hw[2] * f0 + hw[3] * f1 + hb[1],
        ];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let rng = StreamRng::new(5, "m");
        let model: Model<f64> = Model::init(small_single(3), &rng);
        let v = test_video(5);
        assert!(model
            .backward(&[v], &Targets::Classes(&[7]), None)
            .is_err());
    }

    #[test]
    fn doubling_loss_scale_doubles_gradients() {
        // mean loss over a doubled batch of the same sample equals the
        // single-sample loss; gradients must match exactly, and summing
        // two distinct samples is linear
        let rng = StreamRng::new(6, "m");
        let model: Model<f64> = Model::init(small_single(3), &rng);
        let v1 = test_video(6);
        let v2 = test_video(7);
        let (_, g1) = model.backward(&[v1.clone()], &Targets::Classes(&[1]), None).unwrap();
        let (_, g2) = model.backward(&[v2.clone()], &Targets::Classes(&[2]), None).unwrap();
        let (_, gboth) = model
            .backward(&[v1, v2], &Targets::Classes(&[1, 2]), None)
            .unwrap();
        for ((a, b), both) in g1.iter().zip(&g2).zip(&gboth) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(both.data()) {
                assert!((0.5 * (x + y) - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detached_stream_gets_zero_gradient() {
        // cross_connection = None, constant fusion gates, and a head that
        // reads only the appearance half: the motion convs sit on no path
        // to the loss, so their gradients are exactly zero.
        let rng = StreamRng::new(7, "m");
        let descriptor = ArchitectureDescriptor {
            widths: [2, 2],
            ..ArchitectureDescriptor::two_stream(
                CrossConnection::None,
                FusionKind::Gated,
                Head::Classifier { classes: 2 },
            )
        };
        let mut model: Model<f64> = Model::init(descriptor, &rng);
        {
            let mut params = model.params_mut();
            // SE weights to zero (gates become constant 0.5)
            for idx in 8..=11 {
                for v in params[idx].data_mut() {
                    *v = 0.0;
                }
            }
            // spatial conv weights to zero (constant residual gate)
            for v in params[12].data_mut() {
                *v = 0.0;
            }
            // head reads only channels 0..2 (the appearance half of the
            // fused 4-channel feature)
            let head_w = params[14].data_mut();
            // w is [classes=2, feat=4] row-major
            head_w[2] = 0.0;
            head_w[3] = 0.0;
            head_w[6] = 0.0;
            head_w[7] = 0.0;
        }
        let v = test_video(8);
        let (_, grads) = model
            .backward(&[v], &Targets::Classes(&[0]), None)
            .unwrap();
        // mot1 params are grads[2], grads[3]; mot2 are grads[6], grads[7]
        for idx in [2usize, 3, 6, 7] {
            for g in grads[idx].data() {
                assert_eq!(*g, 0.0, "motion param {idx} leaked gradient");
            }
        }
        // appearance convs do receive gradient
        assert!(grads[0].data().iter().any(|g| g.abs() > 1e-12));
    }
}
