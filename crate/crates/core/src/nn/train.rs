//! SGD-with-momentum training loop with checkpointing, optional frame
//! shuffling, and the dropout hooks (standard channel dropout and the
//! score-guided static dropout).

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::interventions;
use crate::nn::checkpoint::ModelCheckpoint;
use crate::nn::model::{accuracy, mean_iou, ChannelScales, Head, Model, Targets};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::{flow_analog, Video};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutKind {
    None,
    /// Independent per-channel Bernoulli dropout at the final block.
    Standard { rate: f64 },
    /// Score-guided channel dropout (probabilities from static-pair
    /// correlations, re-estimated on the current batch).
    Static { rate: f64, reestimate_every: usize },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub dropout: DropoutKind,
    /// Replace every video with a freshly shuffled-frame copy each epoch.
    pub shuffle_frames: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            checkpoint_every: 5,
            dropout: DropoutKind::None,
            shuffle_frames: false,
        }
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub checkpoints: Vec<ModelCheckpoint>,
    pub epoch_losses: Vec<f64>,
}

fn targets_of<S: Scalar>(dataset: &Dataset<S>, indices: &[usize], head: &Head) -> Result<OwnedTargets<S>> {
    match head {
        Head::Classifier { .. } => Ok(OwnedTargets::Classes(
            indices.iter().map(|&i| dataset.samples[i].label).collect(),
        )),
        Head::Segmenter => {
            let masks: Option<Vec<Tensor<S>>> = indices
                .iter()
                .map(|&i| dataset.samples[i].mask.clone())
                .collect();
            masks.map(OwnedTargets::Masks).ok_or_else(|| {
                Error::invalid("segmentation training needs ground-truth masks on every sample")
            })
        }
    }
}

enum OwnedTargets<S: Scalar> {
    Classes(Vec<usize>),
    Masks(Vec<Tensor<S>>),
}

impl<S: Scalar> OwnedTargets<S> {
    fn as_ref(&self) -> Targets<'_, S> {
        match self {
            OwnedTargets::Classes(c) => Targets::Classes(c),
            OwnedTargets::Masks(m) => Targets::Masks(m),
        }
    }
}

fn shuffled_video<S: Scalar>(video: &Video<S>, rng: &mut StreamRng) -> Video<S> {
    let perm = rng.non_identity_permutation(video.frames());
    let mut out = video.permute_frames(&perm).expect("valid permutation");
    if video.flow.is_some() {
        out.flow = Some(flow_analog(&out.rgb));
    }
    out
}

/// Trains in place. Checkpoints are captured at epoch 0 (untrained), every
/// `checkpoint_every` epochs, and after the final epoch.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    dataset: &Dataset<S>,
    config: &TrainConfig,
    rng: &StreamRng,
) -> Result<TrainRun> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    match config.dropout {
        DropoutKind::Standard { rate } | DropoutKind::Static { rate, .. } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        DropoutKind::None => {}
    }

    let head = model.descriptor.head;
    let dropout_layer = model.final_block().to_string();
    let channels = model.layer_channels(&dropout_layer)?;
    let mut momentum: Vec<Tensor<S>> = model.zero_grads();
    let mut checkpoints = vec![ModelCheckpoint::capture(model, &momentum, 0, rng)];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut iteration: u64 = 0;
    let mut dropout_probs: Option<Vec<f64>> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut order_rng = rng.substream_indexed("epoch_order", epoch as u64);
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for (batch_id, chunk) in order.chunks(config.batch_size).enumerate() {
            let videos: Vec<Video<S>> = chunk
                .iter()
                .map(|&i| {
                    if config.shuffle_frames {
                        let mut r = rng
                            .substream_indexed("frame_shuffle", epoch as u64)
                            .substream_indexed("video", i as u64);
                        shuffled_video(&dataset.samples[i].video, &mut r)
                    } else {
                        dataset.samples[i].video.clone()
                    }
                })
                .collect();
            let targets = targets_of(dataset, chunk, &head)?;

            let extra = match config.dropout {
                DropoutKind::None => None,
                DropoutKind::Standard { rate } => {
                    let mut r = rng.substream_indexed("std_dropout", iteration);
                    let keep = S::from_f64(1.0 / (1.0 - rate));
                    let scale: Vec<S> = (0..channels)
                        .map(|_| if r.coin(rate) { S::zero() } else { keep })
                        .collect();
                    let mut scales = ChannelScales::new();
                    scales.insert(dropout_layer.clone(), scale);
                    Some(scales)
                }
                DropoutKind::Static {
                    rate,
                    reestimate_every,
                } => {
                    let period = reestimate_every.max(1) as u64;
                    if dropout_probs.is_none() || iteration % period == 0 {
                        let mut r = rng.substream_indexed("sd_scores", iteration);
                        let scores = interventions::static_scores_for_dropout(
                            model,
                            &videos,
                            &dropout_layer,
                            &mut r,
                        )?;
                        dropout_probs = Some(interventions::static_dropout_probs(&scores)?);
                    }
                    let probs = dropout_probs.as_ref().unwrap();
                    let mut r = rng.substream_indexed("sd_draw", iteration);
                    let scale = interventions::static_dropout_scale::<S>(probs, rate, &mut r)?;
                    let mut scales = ChannelScales::new();
                    scales.insert(dropout_layer.clone(), scale);
                    Some(scales)
                }
            };

            let (loss, grads) = model.backward(&videos, &targets.as_ref(), extra.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch_id,
                    detail: format!("epoch {epoch}, batch indices {chunk:?}"),
                });
            }
            epoch_loss += loss;
            batches += 1;
            iteration += 1;

            let lr = S::from_f64(config.lr);
            let mu = S::from_f64(config.momentum);
            for (slot, (buf, grad)) in model
                .params_mut()
                .into_iter()
                .zip(momentum.iter_mut().zip(&grads))
            {
                for ((p, m), g) in slot
                    .data_mut()
                    .iter_mut()
                    .zip(buf.data_mut().iter_mut())
                    .zip(grad.data())
                {
                    *m = mu * *m + *g;
                    *p = *p - lr * *m;
                }
            }
        }

        epoch_losses.push(epoch_loss / batches.max(1) as f64);
        let done = epoch + 1;
        let periodic = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        if (periodic || done == config.epochs) && checkpoints.last().map(|c| c.epoch) != Some(done)
        {
            checkpoints.push(ModelCheckpoint::capture(model, &momentum, done, rng));
        }
    }

    Ok(TrainRun {
        checkpoints,
        epoch_losses,
    })
}

/// Top-1 accuracy of a classifier over a dataset, in fixed-size chunks.
pub fn evaluate_accuracy<S: Scalar>(model: &Model<S>, dataset: &Dataset<S>) -> Result<f64> {
    let mut correct_weighted = 0.0;
    for chunk in dataset.samples.chunks(64) {
        let videos: Vec<Video<S>> = chunk.iter().map(|s| s.video.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let (out, _) = model.forward(&videos, false)?;
        correct_weighted += accuracy(&out, &labels) * chunk.len() as f64;
    }
    Ok(correct_weighted / dataset.len() as f64)
}

/// Accuracy on shuffled-frame copies of the evaluation set.
pub fn evaluate_accuracy_shuffled<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset<S>,
    rng: &StreamRng,
) -> Result<f64> {
    let mut correct_weighted = 0.0;
    for (start, chunk) in dataset.samples.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
        let videos: Vec<Video<S>> = chunk
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let mut r = rng.substream_indexed("eval_shuffle", (start + j) as u64);
                shuffled_video(&s.video, &mut r)
            })
            .collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let (out, _) = model.forward(&videos, false)?;
        correct_weighted += accuracy(&out, &labels) * chunk.len() as f64;
    }
    Ok(correct_weighted / dataset.len() as f64)
}

/// Mean IoU of a segmenter over a dataset (threshold 0.5).
pub fn evaluate_iou<S: Scalar>(model: &Model<S>, dataset: &Dataset<S>) -> Result<f64> {
    let mut total = 0.0;
    for chunk in dataset.samples.chunks(64) {
        let videos: Vec<Video<S>> = chunk.iter().map(|s| s.video.clone()).collect();
        let masks: Vec<Tensor<S>> = chunk
            .iter()
            .map(|s| {
                s.mask
                    .clone()
                    .ok_or_else(|| Error::invalid("evaluation sample without mask"))
            })
            .collect::<Result<_>>()?;
        let (out, _) = model.forward(&videos, false)?;
        total += mean_iou(&out, &masks, 0.5) * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GenOptions, TaskMode, VideoDims};
    use crate::nn::model::ArchitectureDescriptor;

    fn tiny_dataset(n: usize) -> Dataset<f32> {
        generate_dataset(
            TaskMode::Mixed,
            n,
            GenOptions {
                dims: VideoDims {
                    frames: 4,
                    height: 8,
                    width: 8,
                },
                palettes: 2,
                with_flow: false,
            },
            &StreamRng::new(33, "train-test"),
        )
    }

    fn tiny_model(classes: usize, seed: u64) -> Model<f32> {
        Model::init(
            ArchitectureDescriptor {
                widths: [3, 4],
                ..ArchitectureDescriptor::single(classes)
            },
            &StreamRng::new(seed, "train-model"),
        )
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = tiny_dataset(8);
        let mut model = tiny_model(16, 1);
        let before: Vec<Tensor<f32>> = model.params().iter().map(|p| (*p).clone()).collect();
        let config = TrainConfig {
            epochs: 2,
            lr: 0.0,
            batch_size: 4,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        train(&mut model, &ds, &config, &StreamRng::new(2, "t")).unwrap();
        for (a, b) in before.iter().zip(model.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_sample_memorizes() {
        let mut ds = tiny_dataset(8);
        ds.samples.truncate(1);
        let mut model = tiny_model(16, 3);
        let config = TrainConfig {
            epochs: 120,
            lr: 0.08,
            momentum: 0.9,
            batch_size: 1,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let run = train(&mut model, &ds, &config, &StreamRng::new(4, "t")).unwrap();
        let last = *run.epoch_losses.last().unwrap();
        assert!(last < 0.01, "memorization loss {last}");
    }

    #[test]
    fn fixed_seed_reproduces_checkpoints_bitwise() {
        let ds = tiny_dataset(12);
        let config = TrainConfig {
            epochs: 3,
            lr: 0.05,
            batch_size: 4,
            checkpoint_every: 1,
            dropout: DropoutKind::Standard { rate: 0.3 },
            ..TrainConfig::default()
        };
        let mut m1 = tiny_model(16, 5);
        let mut m2 = tiny_model(16, 5);
        let r1 = train(&mut m1, &ds, &config, &StreamRng::new(6, "t")).unwrap();
        let r2 = train(&mut m2, &ds, &config, &StreamRng::new(6, "t")).unwrap();
        assert_eq!(r1.checkpoints.len(), r2.checkpoints.len());
        for (a, b) in r1.checkpoints.iter().zip(&r2.checkpoints) {
            assert_eq!(a.epoch, b.epoch);
            for (pa, pb) in a.params.iter().zip(&b.params) {
                assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn checkpoints_include_first_and_last_epoch() {
        let ds = tiny_dataset(8);
        let mut model = tiny_model(16, 7);
        let config = TrainConfig {
            epochs: 5,
            lr: 0.01,
            batch_size: 4,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let run = train(&mut model, &ds, &config, &StreamRng::new(8, "t")).unwrap();
        let epochs: Vec<usize> = run.checkpoints.iter().map(|c| c.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 4, 5]);
    }
}
