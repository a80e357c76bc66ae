//! Runtime manipulations of unit populations: top-k channel removal with
//! its least-biased random baseline, and the score-guided static dropout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::nn::train::{train, DropoutKind, TrainConfig, TrainRun};
use crate::pairs::Factor;
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::stats::{pearson, softmax};
use crate::tensor::Tensor;
use crate::video::{flow_analog, Video};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RemovalMode {
    TopBiased { factor: Factor },
    RandomLeastBiased { percent: f64 },
    PureRandom,
}

/// A resolved set of channels to silence at one layer; serialized into
/// experiment reports for auditability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalPlan {
    pub layer: String,
    pub mode: RemovalMode,
    pub channels: Vec<usize>,
}

impl RemovalPlan {
    fn validate(&self, num_channels: usize) -> Result<()> {
        let mut seen = vec![false; num_channels];
        for &c in &self.channels {
            if c >= num_channels {
                return Err(Error::invalid(format!(
                    "channel {c} out of range for layer {} with {num_channels} channels",
                    self.layer
                )));
            }
            if seen[c] {
                return Err(Error::invalid(format!("duplicate channel {c} in plan")));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

/// Indices of the k highest-scoring channels (ties break toward the lower
/// index, descending score order).
pub fn rank_top_biased(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// The paper's random baseline: pool the (x+5)% of channels least biased
/// toward the dominant factor, then sample x% of all channels uniformly
/// from that pool without replacement.
pub fn rank_random_least_biased(
    scores: &[f64],
    x_percent: f64,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if !(0.0..=100.0).contains(&x_percent) {
        return Err(Error::invalid(format!("x% = {x_percent} outside [0, 100]")));
    }
    let n = scores.len();
    let m = (x_percent * n as f64 / 100.0).round() as usize;
    if m == 0 {
        return Ok(Vec::new());
    }
    // pool clamps to all channels when x+5 exceeds 100
    let pool_size = (((x_percent + 5.0) * n as f64 / 100.0).round() as usize).clamp(m, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    idx.truncate(pool_size);
    let picks = rng.sample_without_replacement(pool_size, m);
    Ok(picks.into_iter().map(|i| idx[i]).collect())
}

pub fn plan_top_biased(layer: &str, factor: Factor, scores: &[f64], k: usize) -> RemovalPlan {
    RemovalPlan {
        layer: layer.to_string(),
        mode: RemovalMode::TopBiased { factor },
        channels: rank_top_biased(scores, k),
    }
}

pub fn plan_random_least_biased(
    layer: &str,
    dominant_scores: &[f64],
    x_percent: f64,
    rng: &mut StreamRng,
) -> Result<RemovalPlan> {
    Ok(RemovalPlan {
        layer: layer.to_string(),
        mode: RemovalMode::RandomLeastBiased { percent: x_percent },
        channels: rank_random_least_biased(dominant_scores, x_percent, rng)?,
    })
}

pub fn plan_pure_random(
    layer: &str,
    num_channels: usize,
    k: usize,
    rng: &mut StreamRng,
) -> RemovalPlan {
    RemovalPlan {
        layer: layer.to_string(),
        mode: RemovalMode::PureRandom,
        channels: rng.sample_without_replacement(num_channels, k.min(num_channels)),
    }
}

/// Returns a copy of the model whose forward passes behave as if the
/// planned channels' activations were forced to zero at the plan's layer
/// (persistent mask, applied post-block). Masks compose: removing A then
/// B equals removing A ∪ B.
pub fn remove_units<S: Scalar>(model: &Model<S>, plan: &RemovalPlan) -> Result<Model<S>> {
    let channels = model.layer_channels(&plan.layer)?;
    plan.validate(channels)?;
    let mut masked = model.clone();
    let scale = masked
        .masks
        .entry(plan.layer.clone())
        .or_insert_with(|| vec![S::one(); channels]);
    for &c in &plan.channels {
        scale[c] = S::zero();
    }
    Ok(masked)
}

/// Training-time dropout state for one layer, serializable into reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropoutState {
    pub layer: String,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub rate: f64,
    pub reestimate_every: usize,
    pub iteration: u64,
}

impl DropoutState {
    pub fn new(layer: &str, rate: f64, reestimate_every: usize) -> Self {
        DropoutState {
            layer: layer.to_string(),
            scores: Vec::new(),
            probs: Vec::new(),
            rate,
            reestimate_every,
            iteration: 0,
        }
    }
}

/// Per-channel static scores: for every video in the batch, pair it with a
/// shuffled-frame copy, run both through the model, pool the layer's
/// activations, and correlate per channel across the batch.
pub fn static_scores_for_dropout<S: Scalar>(
    model: &Model<S>,
    batch: &[Video<S>],
    layer: &str,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if batch.len() < 8 {
        return Err(Error::invalid(format!(
            "static score estimation needs a batch of at least 8, got {}",
            batch.len()
        )));
    }
    let shuffled: Vec<Video<S>> = batch
        .iter()
        .map(|v| {
            let perm = rng.non_identity_permutation(v.frames());
            let mut out = v.permute_frames(&perm)?;
            if v.flow.is_some() {
                out.flow = Some(flow_analog(&out.rgb));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let (_, acts1) = model.forward(batch, true)?;
    let (_, acts2) = model.forward(&shuffled, true)?;
    let acts1 = acts1.expect("capture requested");
    let acts2 = acts2.expect("capture requested");
    let t1 = acts1
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer '{layer}' not captured")))?;
    let t2 = acts2.get(layer).expect("same probe layers");
    let channels = *t1[0].shape().last().unwrap();
    let pool = |tensors: &[Tensor<S>]| -> Result<Vec<Vec<f64>>> {
        tensors
            .iter()
            .map(|t| {
                Ok(crate::stats::gap_pool(t, t.rank() - 1)?
                    .into_iter()
                    .map(|v| v.to_f64_())
                    .collect())
            })
            .collect()
    };
    let z1 = pool(t1)?;
    let z2 = pool(t2)?;
    (0..channels)
        .map(|c| {
            let a: Vec<f64> = z1.iter().map(|row| row[c]).collect();
            let b: Vec<f64> = z2.iter().map(|row| row[c]).collect();
            pearson(&a, &b)
        })
        .collect()
}

/// Drop probabilities from channel scores: p_i = exp(S_i) / sum_k exp(S_k).
pub fn static_dropout_probs(scores: &[f64]) -> Result<Vec<f64>> {
    softmax(scores)
}

/// Draws m = round(rate * C) distinct channels, proportionally to `probs`
/// without replacement (iterative renormalized draws).
pub fn sample_dropout_channels(
    probs: &[f64],
    rate: f64,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let c = probs.len();
    let m = (rate * c as f64).round() as usize;
    let mut remaining: Vec<usize> = (0..c).collect();
    let mut weights: Vec<f64> = probs.to_vec();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = weights.iter().sum();
        let mut u = rng.next_f64() * total;
        let mut chosen = remaining.len() - 1;
        for (slot, &w) in weights.iter().enumerate() {
            if u < w {
                chosen = slot;
                break;
            }
            u -= w;
        }
        picked.push(remaining[chosen]);
        remaining.swap_remove(chosen);
        weights.swap_remove(chosen);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Channel multipliers for one dropout draw: zero on dropped channels,
/// 1/(1-rate) on survivors (inverted scaling keeps the activation
/// expectation aligned between train and eval).
pub fn static_dropout_scale<S: Scalar>(
    probs: &[f64],
    rate: f64,
    rng: &mut StreamRng,
) -> Result<Vec<S>> {
    let dropped = sample_dropout_channels(probs, rate, rng)?;
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let mut scale = vec![keep; probs.len()];
    for &c in &dropped {
        scale[c] = S::zero();
    }
    if dropped.is_empty() {
        scale.fill(S::one());
    }
    Ok(scale)
}

/// Applies one static-dropout draw to a channel-last activation tensor.
/// Identity outside training mode.
pub fn apply_static_dropout<S: Scalar>(
    activations: &Tensor<S>,
    state: &DropoutState,
    training: bool,
    rng: &mut StreamRng,
) -> Result<Tensor<S>> {
    if !training {
        return Ok(activations.clone());
    }
    let channels = *activations.shape().last().unwrap();
    if state.probs.len() != channels {
        return Err(Error::invalid(format!(
            "dropout state holds {} probabilities for {channels} channels",
            state.probs.len()
        )));
    }
    let scale = static_dropout_scale::<S>(&state.probs, state.rate, rng)?;
    Ok(crate::nn::layers::scale_channels(activations, &scale))
}

/// Standard training with all dropout disabled (the inference-time
/// finetuning step). Zero epochs is an exact identity.
pub fn finetune_no_dropout<S: Scalar>(
    model: &mut Model<S>,
    dataset: &crate::dataset::Dataset<S>,
    epochs: usize,
    lr: f64,
    rng: &StreamRng,
) -> Result<TrainRun> {
    let config = TrainConfig {
        epochs,
        lr,
        momentum: 0.9,
        batch_size: 32,
        checkpoint_every: 0,
        dropout: DropoutKind::None,
        shuffle_frames: false,
    };
    if epochs == 0 {
        return Ok(TrainRun {
            checkpoints: Vec::new(),
            epoch_losses: Vec::new(),
        });
    }
    train(model, dataset, &config, rng)
}

/// Convenience for ablation experiments: accuracy of the model after
/// applying a removal plan.
pub fn masked_accuracy<S: Scalar>(
    model: &Model<S>,
    plan: &RemovalPlan,
    dataset: &crate::dataset::Dataset<S>,
) -> Result<f64> {
    let masked = remove_units(model, plan)?;
    crate::nn::train::evaluate_accuracy(&masked, dataset)
}
