//! The bias metrics: layer-wise factor scores, per-unit correlations,
//! unit classification, center-bias maps, and epoch sweeps, plus the
//! on-disk trace exchange format.
//!
//! Trace directory layout: `trace.json` (version, factor, per-layer name,
//! channel and pair counts, file names) plus `<name>.z1.f32` /
//! `<name>.z2.f32`, little-endian binary32, row-major pairs x channels,
//! no header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_f32_tensor, write_f32_tensor};
use crate::error::{Error, Result};
use crate::nn::checkpoint::ModelCheckpoint;
use crate::nn::model::Model;
use crate::pairs::{Factor, FactorPair};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::stats::{gap_pool, pearson, softmax};
use crate::tensor::Tensor;
use crate::video::Video;

/// Anything whose per-layer, per-channel pooled activations can be probed.
/// Models implement it via capture + global average pooling; hand-built
/// oracle networks implement it directly.
pub trait ActivationSource<S: Scalar> {
    fn source_layers(&self) -> Vec<String>;
    /// Pooled activations at `layer`: one row per video, one column per
    /// channel.
    fn pooled(&self, videos: &[Video<S>], layer: &str) -> Result<Vec<Vec<S>>>;
}

impl<S: Scalar> ActivationSource<S> for Model<S> {
    fn source_layers(&self) -> Vec<String> {
        self.probe_layers().iter().map(|s| s.to_string()).collect()
    }

    fn pooled(&self, videos: &[Video<S>], layer: &str) -> Result<Vec<Vec<S>>> {
        let mut rows = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(32) {
            let (_, acts) = self.forward(chunk, true)?;
            let acts = acts.expect("capture requested");
            let tensors = acts
                .get(layer)
                .ok_or_else(|| Error::invalid(format!("unknown probe layer '{layer}'")))?;
            for t in tensors {
                rows.push(gap_pool(t, t.rank() - 1)?);
            }
        }
        Ok(rows)
    }
}

/// Per-layer paired pooled activations for one shared factor.
#[derive(Debug, Clone)]
pub struct ActivationTrace<S: Scalar> {
    pub factor: Factor,
    pub layers: Vec<LayerTrace<S>>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace<S: Scalar> {
    pub name: String,
    /// pairs x channels, row k = pooled activations of side 1 of pair k.
    pub z1: Tensor<S>,
    pub z2: Tensor<S>,
}

impl<S: Scalar> ActivationTrace<S> {
    pub fn layer(&self, name: &str) -> Result<&LayerTrace<S>> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::invalid(format!("trace has no layer '{name}'")))
    }
}

fn rows_to_tensor<S: Scalar>(rows: Vec<Vec<S>>) -> Tensor<S> {
    let pairs = rows.len();
    let channels = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(pairs * channels);
    for row in rows {
        data.extend(row);
    }
    Tensor::from_vec(&[pairs, channels], data).expect("trace matrix shape")
}

/// Runs both pair sides through the source and pools per channel. Rows
/// are ordered by pair index.
pub fn collect_trace<S: Scalar>(
    source: &impl ActivationSource<S>,
    pairs: &[FactorPair<S>],
    layers: &[String],
) -> Result<ActivationTrace<S>> {
    if pairs.len() < 2 {
        return Err(Error::invalid("collect_trace: need at least 2 pairs"));
    }
    let factor = pairs[0].shared_factor;
    if pairs.iter().any(|p| p.shared_factor != factor) {
        return Err(Error::invalid(
            "collect_trace: pairs carry heterogeneous factor tags",
        ));
    }
    let side1: Vec<Video<S>> = pairs.iter().map(|p| p.a.clone()).collect();
    let side2: Vec<Video<S>> = pairs.iter().map(|p| p.b.clone()).collect();
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let z1 = rows_to_tensor(source.pooled(&side1, layer)?);
        let z2 = rows_to_tensor(source.pooled(&side2, layer)?);
        out.push(LayerTrace {
            name: layer.clone(),
            z1,
            z2,
        });
    }
    Ok(ActivationTrace {
        factor,
        layers: out,
    })
}

/// Per-channel correlation between the paired trace columns.
pub fn channel_correlations<S: Scalar>(layer: &LayerTrace<S>) -> Result<Vec<f64>> {
    let channels = layer.z1.shape()[1];
    let pairs = layer.z1.shape()[0];
    if layer.z2.shape() != layer.z1.shape() {
        return Err(Error::shape("trace sides have different shapes"));
    }
    (0..channels)
        .map(|c| {
            let a: Vec<f64> = (0..pairs)
                .map(|p| layer.z1.at(&[p, c]).to_f64_())
                .collect();
            let b: Vec<f64> = (0..pairs)
                .map(|p| layer.z2.at(&[p, c]).to_f64_())
                .collect();
            pearson(&a, &b)
        })
        .collect()
}

/// Normalization of the layer score: the mean keeps the identical-factor
/// ceiling at 1; the raw sum is the printed form, kept behind this switch
/// for fidelity comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreNorm {
    Mean,
    RawSum,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerBias {
    pub layer: String,
    pub channels: usize,
    /// S_F per factor.
    pub scores: BTreeMap<String, f64>,
    /// N_F per factor: softmax over scores, scaled by channel count.
    pub unit_counts: BTreeMap<String, f64>,
}

/// Layer-wise metric: S_F from per-channel correlations, N_F from the
/// shift-invariant softmax over the factor scores times N^l.
pub fn layer_bias<S: Scalar>(
    traces: &[&ActivationTrace<S>],
    layer: &str,
    norm: ScoreNorm,
) -> Result<LayerBias> {
    if traces.is_empty() {
        return Err(Error::invalid("layer_bias: no traces supplied"));
    }
    let mut seen = Vec::new();
    let mut channels = None;
    let mut scores = Vec::new();
    for trace in traces {
        if seen.contains(&trace.factor) {
            return Err(Error::invalid(format!(
                "layer_bias: duplicate trace for factor {}",
                trace.factor.name()
            )));
        }
        seen.push(trace.factor);
        let lt = trace.layer(layer)?;
        let c = lt.z1.shape()[1];
        match channels {
            None => channels = Some(c),
            Some(expect) if expect != c => {
                return Err(Error::shape(format!(
                    "layer_bias: trace for {} has {c} channels, expected {expect}",
                    trace.factor.name()
                )));
            }
            _ => {}
        }
        let corr = channel_correlations(lt)?;
        let sum: f64 = corr.iter().sum();
        scores.push(match norm {
            ScoreNorm::Mean => sum / c as f64,
            ScoreNorm::RawSum => sum,
        });
    }
    let channels = channels.unwrap();
    let weights = softmax(&scores)?;
    Ok(LayerBias {
        layer: layer.to_string(),
        channels,
        scores: seen
            .iter()
            .zip(&scores)
            .map(|(f, &s)| (f.name().to_string(), s))
            .collect(),
        unit_counts: seen
            .iter()
            .zip(&weights)
            .map(|(f, &w)| (f.name().to_string(), w * channels as f64))
            .collect(),
    })
}

/// Closed-form variant for synthetic score vectors (no traces involved).
pub fn unit_counts_from_scores(scores: &[f64], channels: usize) -> Result<Vec<f64>> {
    Ok(softmax(scores)?
        .into_iter()
        .map(|w| w * channels as f64)
        .collect())
}

#[derive(Debug, Clone)]
pub struct UnitScores {
    pub layer: String,
    pub static_scores: Vec<f64>,
    pub dynamic_scores: Vec<f64>,
}

/// Unit-wise metric over the two informative factors.
pub fn unit_scores<S: Scalar>(
    static_trace: &ActivationTrace<S>,
    dynamic_trace: &ActivationTrace<S>,
    layer: &str,
) -> Result<UnitScores> {
    if static_trace.factor != Factor::Static || dynamic_trace.factor != Factor::Dynamic {
        return Err(Error::invalid(
            "unit_scores expects a static trace and a dynamic trace",
        ));
    }
    let s = channel_correlations(static_trace.layer(layer)?)?;
    let d = channel_correlations(dynamic_trace.layer(layer)?)?;
    if s.len() != d.len() {
        return Err(Error::shape("factor traces disagree on channel count"));
    }
    Ok(UnitScores {
        layer: layer.to_string(),
        static_scores: s,
        dynamic_scores: d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitClass {
    Static,
    Dynamic,
    Joint,
    Residual,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_static: usize,
    pub n_dynamic: usize,
    pub n_joint: usize,
    pub n_residual: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.n_static + self.n_dynamic + self.n_joint + self.n_residual
    }
}

/// Threshold classification: boundary scores (s == lambda) fall to the
/// non-exceeding side, so ties land in the weaker class.
pub fn classify_units(
    scores: &UnitScores,
    lambda: f64,
) -> Result<(Vec<UnitClass>, ClassCounts)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid(format!("lambda {lambda} outside (0, 1)")));
    }
    let mut counts = ClassCounts::default();
    let classes = scores
        .static_scores
        .iter()
        .zip(&scores.dynamic_scores)
        .map(|(&s, &d)| match (s > lambda, d > lambda) {
            (true, false) => {
                counts.n_static += 1;
                UnitClass::Static
            }
            (false, true) => {
                counts.n_dynamic += 1;
                UnitClass::Dynamic
            }
            (true, true) => {
                counts.n_joint += 1;
                UnitClass::Joint
            }
            (false, false) => {
                counts.n_residual += 1;
                UnitClass::Residual
            }
        })
        .collect();
    Ok((classes, counts))
}

/// Per-pixel foreground frequency, normalized so the map maximum is 1
/// (all-empty masks give an all-zero map).
pub fn center_bias<S: Scalar>(masks: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("center_bias: empty mask list"))?;
    let shape = first.shape().to_vec();
    let mut acc = vec![0.0f64; first.len()];
    for m in masks {
        if m.shape() != shape.as_slice() {
            return Err(Error::shape("center_bias: mask shapes differ"));
        }
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v.to_f64_();
        }
    }
    let n = masks.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    let max = acc.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for a in acc.iter_mut() {
            *a /= max;
        }
    }
    Tensor::from_vec(&shape, acc.into_iter().map(S::from_f64).collect())
}

/// Full per-layer report: layer-wise scores and counts (with both the
/// two- and three-factor softmax denominators), per-unit scores, and the
/// classification at the given threshold.
#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub lambda: f64,
    pub norm: ScoreNorm,
    pub layers: Vec<LayerReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub channels: usize,
    pub scores: BTreeMap<String, f64>,
    pub unit_counts_three_factor: BTreeMap<String, f64>,
    pub unit_counts_two_factor: BTreeMap<String, f64>,
    pub unit_static_scores: Vec<f64>,
    pub unit_dynamic_scores: Vec<f64>,
    pub class_counts: ClassCounts,
    pub classes: Vec<UnitClass>,
}

pub fn bias_report<S: Scalar>(
    static_trace: &ActivationTrace<S>,
    dynamic_trace: &ActivationTrace<S>,
    identical_trace: &ActivationTrace<S>,
    layers: &[String],
    lambda: f64,
    norm: ScoreNorm,
) -> Result<BiasReport> {
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let three = layer_bias(
            &[static_trace, dynamic_trace, identical_trace],
            layer,
            norm,
        )?;
        let two = layer_bias(&[static_trace, dynamic_trace], layer, norm)?;
        let units = unit_scores(static_trace, dynamic_trace, layer)?;
        let (classes, class_counts) = classify_units(&units, lambda)?;
        out.push(LayerReport {
            layer: layer.clone(),
            channels: three.channels,
            scores: three.scores,
            unit_counts_three_factor: three.unit_counts,
            unit_counts_two_factor: two.unit_counts,
            unit_static_scores: units.static_scores,
            unit_dynamic_scores: units.dynamic_scores,
            class_counts,
            classes,
        })
    }
    Ok(BiasReport {
        lambda,
        norm,
        layers: out,
    })
}

/// Builds the three factor-pair sets used by every probing run. The pair
/// sets are functions of (rng, count) alone, so a fixed stream yields
/// identical pairs across checkpoints.
pub struct PairSets<S: Scalar> {
    pub static_pairs: Vec<FactorPair<S>>,
    pub dynamic_pairs: Vec<FactorPair<S>>,
    pub identical_pairs: Vec<FactorPair<S>>,
}

pub fn build_pair_sets<S: Scalar>(
    videos: &[Video<S>],
    count: usize,
    rng: &StreamRng,
) -> Result<PairSets<S>> {
    if videos.is_empty() {
        return Err(Error::invalid("build_pair_sets: no videos"));
    }
    let mut static_pairs = Vec::with_capacity(count);
    let mut dynamic_pairs = Vec::with_capacity(count);
    let mut identical_pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng.substream_indexed("pair", i as u64);
        let v = &videos[r.below(videos.len())];
        static_pairs.push(crate::pairs::make_static_pair(v, &mut r)?);
        dynamic_pairs.push(crate::pairs::make_dynamic_pair(v, &mut r)?);
        identical_pairs.push(crate::pairs::make_identical_pair(v, &mut r));
    }
    Ok(PairSets {
        static_pairs,
        dynamic_pairs,
        identical_pairs,
    })
}

#[derive(Debug)]
pub struct EpochBias {
    pub epoch: usize,
    pub report: BiasReport,
}

/// One report per checkpoint over fixed pair sets (fixing the pairs
/// removes data variance from the training-time comparison).
pub fn epoch_sweep<S: Scalar>(
    checkpoints: &[ModelCheckpoint],
    pair_sets: &PairSets<S>,
    layers: &[String],
    lambda: f64,
    norm: ScoreNorm,
) -> Result<Vec<EpochBias>> {
    checkpoints
        .iter()
        .map(|ckpt| {
            let model: Model<S> = ckpt.to_model();
            let st = collect_trace(&model, &pair_sets.static_pairs, layers)?;
            let dy = collect_trace(&model, &pair_sets.dynamic_pairs, layers)?;
            let id = collect_trace(&model, &pair_sets.identical_pairs, layers)?;
            Ok(EpochBias {
                epoch: ckpt.epoch,
                report: bias_report(&st, &dy, &id, layers, lambda, norm)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------
// Trace exchange format
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TraceLayerRecord {
    name: String,
    channels: usize,
    pairs: usize,
    z1_file: String,
    z2_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceManifest {
    version: u32,
    factor: String,
    layers: Vec<TraceLayerRecord>,
}

pub fn write_trace<S: Scalar>(trace: &ActivationTrace<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        let z1_file = format!("{}.z1.f32", layer.name);
        let z2_file = format!("{}.z2.f32", layer.name);
        write_f32_tensor(&dir.join(&z1_file), &layer.z1)?;
        write_f32_tensor(&dir.join(&z2_file), &layer.z2)?;
        records.push(TraceLayerRecord {
            name: layer.name.clone(),
            channels: layer.z1.shape()[1],
            pairs: layer.z1.shape()[0],
            z1_file,
            z2_file,
        });
    }
    let manifest = TraceManifest {
        version: 1,
        factor: trace.factor.name().to_string(),
        layers: records,
    };
    let path = dir.join("trace.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_trace<S: Scalar>(dir: &Path) -> Result<ActivationTrace<S>> {
    let manifest_path = dir.join("trace.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: TraceManifest = serde_json::from_str(&text).map_err(|e| {
        Error::format(
            manifest_path.display().to_string(),
            e.column() as u64,
            e.to_string(),
        )
    })?;
    if manifest.version != 1 {
        return Err(Error::format(
            manifest_path.display().to_string(),
            0,
            format!("unsupported trace version {}", manifest.version),
        ));
    }
    let factor = Factor::parse(&manifest.factor)?;
    let layers = manifest
        .layers
        .into_iter()
        .map(|rec| {
            let shape = [rec.pairs, rec.channels];
            Ok(LayerTrace {
                z1: read_f32_tensor(&dir.join(&rec.z1_file), &shape)?,
                z2: read_f32_tensor(&dir.join(&rec.z2_file), &shape)?,
                name: rec.name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationTrace { factor, layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from_columns(factor: Factor, z1: Vec<Vec<f64>>, z2: Vec<Vec<f64>>) -> ActivationTrace<f64> {
        // columns-as-rows helper: input is pairs x channels already
        ActivationTrace {
            factor,
            layers: vec![LayerTrace {
                name: "l".into(),
                z1: rows_to_tensor(z1),
                z2: rows_to_tensor(z2),
            }],
        }
    }

    #[test]
    fn identical_trace_scores_one() {
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![i as f64, (i * i) as f64 % 7.0, -(i as f64)])
            .collect();
        let trace = trace_from_columns(Factor::Identical, rows.clone(), rows);
        let bias = layer_bias(&[&trace], "l", ScoreNorm::Mean).unwrap();
        assert!((bias.scores["identical"] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_bias_closed_form_softmax() {
        // S = (0, 0, 1), N^l = 100 -> 21.19 / 21.19 / 57.61
        let n = unit_counts_from_scores(&[0.0, 0.0, 1.0], 100).unwrap();
        assert!((n[0] - 100.0 / (2.0 + std::f64::consts::E)).abs() < 1e-9);
        assert!((n[0] - 21.19).abs() < 5e-3);
        assert!((n[1] - 21.19).abs() < 5e-3);
        assert!((n[2] - 57.61).abs() < 5e-3);
        assert!((n.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn equal_scores_split_evenly() {
        let n = unit_counts_from_scores(&[0.4, 0.4, 0.4], 99).unwrap();
        for v in n {
            assert!((v - 33.0).abs() < 1e-9);
        }
    }

    #[test]
    fn classify_matches_threshold_definition() {
        let scores = UnitScores {
            layer: "l".into(),
            static_scores: vec![0.9, 0.2, 0.8, 0.1, 0.5],
            dynamic_scores: vec![0.2, 0.9, 0.8, 0.1, 0.5],
        };
        let (classes, counts) = classify_units(&scores, 0.5).unwrap();
        assert_eq!(
            classes,
            vec![
                UnitClass::Static,
                UnitClass::Dynamic,
                UnitClass::Joint,
                UnitClass::Residual,
                // boundary s == lambda goes to the non-exceeding side
                UnitClass::Residual,
            ]
        );
        assert_eq!(counts.total(), 5);
        assert_eq!(counts.n_residual, 2);
    }

    #[test]
    fn classify_rejects_bad_lambda() {
        let scores = UnitScores {
            layer: "l".into(),
            static_scores: vec![0.1],
            dynamic_scores: vec![0.1],
        };
        assert!(classify_units(&scores, 0.0).is_err());
        assert!(classify_units(&scores, 1.0).is_err());
    }

    #[test]
    fn counts_partition_for_random_matrices() {
        let mut rng = StreamRng::new(1, "cls");
        for _ in 0..1000 {
            let n = 1 + rng.below(64);
            let scores = UnitScores {
                layer: "l".into(),
                static_scores: (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
                dynamic_scores: (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
            };
            let lambda = rng.range_f64(0.05, 0.95);
            let (_, counts) = classify_units(&scores, lambda).unwrap();
            assert_eq!(counts.total(), n);
        }
    }

    #[test]
    fn lambda_monotonicity() {
        let mut rng = StreamRng::new(2, "mono");
        let scores = UnitScores {
            layer: "l".into(),
            static_scores: (0..64).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
            dynamic_scores: (0..64).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
        };
        let mut prev_residual = 0;
        let mut prev_joint = usize::MAX;
        for step in 1..20 {
            let lambda = step as f64 / 20.0;
            let (_, counts) = classify_units(&scores, lambda).unwrap();
            assert!(counts.n_residual >= prev_residual);
            assert!(counts.n_joint <= prev_joint);
            prev_residual = counts.n_residual;
            prev_joint = counts.n_joint;
        }
    }

    #[test]
    fn affine_maps_leave_scores_unchanged() {
        let mut rng = StreamRng::new(3, "aff");
        let rows1: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..4).map(|_| rng.range_f64(-1.0, 1.0)).collect())
            .collect();
        let rows2: Vec<Vec<f64>> = rows1
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| 0.8 * v + 0.05 * rng.range_f64(-1.0, 1.0))
                    .collect()
            })
            .collect();
        let base_s = trace_from_columns(Factor::Static, rows1.clone(), rows2.clone());
        // positive per-channel affine map applied to both sides
        let alpha = [2.0, 0.5, 3.0, 1.25];
        let beta = [1.0, -2.0, 0.0, 5.0];
        let map = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(c, v)| alpha[c] * v + beta[c])
                        .collect()
                })
                .collect()
        };
        let mapped_s = trace_from_columns(Factor::Static, map(&rows1), map(&rows2));
        let a = channel_correlations(&base_s.layers[0]).unwrap();
        let b = channel_correlations(&mapped_s.layers[0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_scores_zero() {
        let rows1: Vec<Vec<f64>> = (0..8).map(|i| vec![3.0, i as f64]).collect();
        let rows2 = rows1.clone();
        let trace = trace_from_columns(Factor::Static, rows1, rows2);
        let corr = channel_correlations(&trace.layers[0]).unwrap();
        assert_eq!(corr[0], 0.0);
        assert!((corr[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn center_bias_hand_cases() {
        let ones = Tensor::<f64>::full(&[2, 2], 1.0);
        let map = center_bias(&[ones.clone(), ones.clone()]).unwrap();
        assert!(map.data().iter().all(|&v| v == 1.0));

        let mut single = Tensor::<f64>::zeros(&[2, 2]);
        single.data_mut()[2] = 1.0;
        let map = center_bias(&[single.clone()]).unwrap();
        assert_eq!(map, single);

        // top half vs full -> 1.0 on top, 0.5 on bottom
        let top = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let full = Tensor::<f64>::full(&[2, 2], 1.0);
        let map = center_bias(&[top, full]).unwrap();
        assert_eq!(map.data(), &[1.0, 1.0, 0.5, 0.5]);

        assert!(center_bias::<f64>(&[]).is_err());
    }

    #[test]
    fn trace_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StreamRng::new(4, "tr");
        let rows1: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..3).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect())
            .collect();
        let rows2: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..3).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect())
            .collect();
        let trace = ActivationTrace {
            factor: Factor::Dynamic,
            layers: vec![LayerTrace {
                name: "block2".into(),
                z1: rows_to_tensor(rows1),
                z2: rows_to_tensor(rows2),
            }],
        };
        write_trace(&trace, dir.path()).unwrap();
        let back: ActivationTrace<f32> = read_trace(dir.path()).unwrap();
        assert_eq!(back.factor, Factor::Dynamic);
        assert_eq!(back.layers[0].z1, trace.layers[0].z1);
        assert_eq!(back.layers[0].z2, trace.layers[0].z2);
    }

    #[test]
    fn truncated_trace_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let trace = ActivationTrace::<f32> {
            factor: Factor::Static,
            layers: vec![LayerTrace {
                name: "l".into(),
                z1: rows_to_tensor(vec![vec![1.0f32, 2.0], vec![3.0, 4.0]]),
                z2: rows_to_tensor(vec![vec![1.0f32, 2.0], vec![3.0, 4.0]]),
            }],
        };
        write_trace(&trace, dir.path()).unwrap();
        let f = dir.path().join("l.z1.f32");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..7]).unwrap();
        assert!(read_trace::<f32>(dir.path()).is_err());
    }

    #[test]
    fn hand_written_trace_bytes_parse_exactly() {
        // 2 pairs x 2 channels, authored byte by byte
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{
  "version": 1,
  "factor": "static",
  "layers": [
    { "name": "l", "channels": 2, "pairs": 2, "z1_file": "l.z1.f32", "z2_file": "l.z2.f32" }
  ]
}"#;
        fs::write(dir.path().join("trace.json"), manifest).unwrap();
        // z1 = [[1.0, 2.0], [3.0, 4.0]]
        let z1: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        // z2 = [[0.5, -1.0], [0.25, 8.0]]
        let z2: Vec<u8> = [0.5f32, -1.0, 0.25, 8.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(dir.path().join("l.z1.f32"), z1).unwrap();
        fs::write(dir.path().join("l.z2.f32"), z2).unwrap();
        let trace: ActivationTrace<f32> = read_trace(dir.path()).unwrap();
        assert_eq!(trace.factor, Factor::Static);
        assert_eq!(trace.layers[0].z1.at(&[1, 0]), 3.0);
        assert_eq!(trace.layers[0].z2.at(&[0, 1]), -1.0);
        assert_eq!(trace.layers[0].z2.at(&[1, 1]), 8.0);
    }

    #[test]
    fn bad_trace_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("trace.json"),
            r#"{"version": 9, "factor": "static", "layers": []}"#,
        )
        .unwrap();
        assert!(read_trace::<f32>(dir.path()).is_err());
    }
}
