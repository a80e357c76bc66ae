//! Labeled synthetic datasets with independently controllable static and
//! dynamic factors, plus the on-disk directory format.
//!
//! Directory layout: `manifest.json` plus one raw little-endian binary32
//! tensor file per video (`<id>.f32`, row-major T,H,W,C, no header), its
//! flow analog as `<id>.flow.f32` (T,H,W,2) and, for segmentation data,
//! `<id>.mask.f32` (H,W).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::{
    self, object_mask, palette_count, render, render_with_flow, sample_spec, DynamicFactor,
    StaticFactor, Video, VideoSpec, COLOR_CHANNELS, DIRECTION_BINS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// Label = palette id; dynamics sampled uniformly, uninformative.
    StaticOnly,
    /// Label = motion direction bin; statics uninformative.
    DynamicOnly,
    /// Label = (palette, direction) product class.
    Mixed,
    /// Binary segmentation; object texture matches the background, so only
    /// motion distinguishes it. Label is always 0; masks carry the target.
    Camouflage,
}

impl TaskMode {
    pub fn name(&self) -> &'static str {
        match self {
            TaskMode::StaticOnly => "static_only",
            TaskMode::DynamicOnly => "dynamic_only",
            TaskMode::Mixed => "mixed",
            TaskMode::Camouflage => "camouflage",
        }
    }

    pub fn parse(s: &str) -> Result<TaskMode> {
        match s {
            "static_only" => Ok(TaskMode::StaticOnly),
            "dynamic_only" => Ok(TaskMode::DynamicOnly),
            "mixed" => Ok(TaskMode::Mixed),
            "camouflage" => Ok(TaskMode::Camouflage),
            other => Err(Error::invalid(format!("unknown task mode '{other}'"))),
        }
    }

    pub fn num_classes(&self, palettes: usize) -> usize {
        match self {
            TaskMode::StaticOnly => palettes,
            TaskMode::DynamicOnly => DIRECTION_BINS,
            TaskMode::Mixed => palettes * DIRECTION_BINS,
            TaskMode::Camouflage => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VideoDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for VideoDims {
    fn default() -> Self {
        VideoDims {
            frames: 8,
            height: 16,
            width: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample<S: Scalar> {
    pub video: Video<S>,
    pub label: usize,
    pub spec: VideoSpec,
    /// Ground-truth object mask at the key frame (segmentation data only).
    pub mask: Option<Tensor<S>>,
}

#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub task_mode: TaskMode,
    pub dims: VideoDims,
    pub palettes: usize,
    pub samples: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.task_mode.num_classes(self.palettes)
    }

    pub fn key_frame(&self) -> usize {
        self.dims.frames / 2
    }
}

const SPEEDS: [usize; 2] = [1, 2];
const FLICKER_PERIODS: [usize; 3] = [0, 2, 4];

/// Generation knobs beyond the task mode.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub dims: VideoDims,
    pub palettes: usize,
    pub with_flow: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            dims: VideoDims::default(),
            palettes: palette_count(),
            with_flow: false,
        }
    }
}

fn sample_one<S: Scalar>(
    task_mode: TaskMode,
    opt: &GenOptions,
    id: u64,
    rng: &StreamRng,
) -> Sample<S> {
    // one substream per video id: generation order never depends on
    // thread schedule
    let mut r = rng.substream_indexed("video", id);
    let camouflage = task_mode == TaskMode::Camouflage;
    let static_factor = StaticFactor {
        palette: r.below(opt.palettes),
        texture: r.below(4),
        shape: r.below(2),
    };
    let dynamic_factor = DynamicFactor {
        direction_bin: r.below(DIRECTION_BINS),
        speed: SPEEDS[r.below(SPEEDS.len())],
        // flicker would reveal a camouflaged object through brightness alone
        flicker_period: if camouflage {
            0
        } else {
            FLICKER_PERIODS[r.below(FLICKER_PERIODS.len())]
        },
    };
    let label = match task_mode {
        TaskMode::StaticOnly => static_factor.palette,
        TaskMode::DynamicOnly => dynamic_factor.direction_bin,
        TaskMode::Mixed => static_factor.palette * DIRECTION_BINS + dynamic_factor.direction_bin,
        TaskMode::Camouflage => 0,
    };
    let spec = sample_spec(
        opt.dims.frames,
        opt.dims.height,
        opt.dims.width,
        static_factor,
        dynamic_factor,
        label,
        camouflage,
        &mut r,
    );
    let video = if opt.with_flow || camouflage {
        render_with_flow(&spec)
    } else {
        render(&spec)
    };
    let mask = camouflage.then(|| object_mask(&spec, opt.dims.frames / 2));
    Sample {
        video,
        label,
        spec,
        mask,
    }
}

/// Generates `n` labeled videos. Uninformative factors are sampled
/// uniformly so they carry no information about the label by construction.
pub fn generate_dataset<S: Scalar>(
    task_mode: TaskMode,
    n: usize,
    opt: GenOptions,
    rng: &StreamRng,
) -> Dataset<S> {
    let samples: Vec<Sample<S>> = (0..n as u64)
        .into_par_iter()
        .map(|id| sample_one(task_mode, &opt, id, rng))
        .collect();
    Dataset {
        task_mode,
        dims: opt.dims,
        palettes: opt.palettes,
        samples,
    }
}

// ---------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VideoRecord {
    id: u64,
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_file: Option<String>,
    label: usize,
    spec: VideoSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    count: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    task_mode: String,
    palettes: usize,
    labels: Vec<usize>,
    videos: Vec<VideoRecord>,
}

pub fn write_f32_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_f32_().to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_tensor<S: Scalar>(path: &Path, shape: &[usize]) -> Result<Tensor<S>> {
    let expected: usize = shape.iter().product::<usize>() * 4;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(expected);
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path.display().to_string(),
            bytes.len() as u64,
            format!("expected {expected} bytes for shape {shape:?}"),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| S::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Writes a dataset directory: manifest plus raw tensor files.
pub fn export_dataset<S: Scalar>(dataset: &Dataset<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let id = i as u64;
        let file = format!("{id}.f32");
        write_f32_tensor(&dir.join(&file), &sample.video.rgb)?;
        let flow_file = match &sample.video.flow {
            Some(flow) => {
                let name = format!("{id}.flow.f32");
                write_f32_tensor(&dir.join(&name), flow)?;
                Some(name)
            }
            None => None,
        };
        let mask_file = match &sample.mask {
            Some(mask) => {
                let name = format!("{id}.mask.f32");
                write_f32_tensor(&dir.join(&name), mask)?;
                Some(name)
            }
            None => None,
        };
        records.push(VideoRecord {
            id,
            file,
            flow_file,
            mask_file,
            label: sample.label,
            spec: sample.spec.clone(),
        });
    }
    let manifest = Manifest {
        version: 1,
        count: dataset.len(),
        t: dataset.dims.frames,
        h: dataset.dims.height,
        w: dataset.dims.width,
        c: COLOR_CHANNELS,
        task_mode: dataset.task_mode.name().to_string(),
        palettes: dataset.palettes,
        labels: dataset.samples.iter().map(|s| s.label).collect(),
        videos: records,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn import_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
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
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    if manifest.videos.len() != manifest.count {
        return Err(Error::format(
            manifest_path.display().to_string(),
            0,
            format!(
                "manifest count {} does not match {} video records",
                manifest.count,
                manifest.videos.len()
            ),
        ));
    }
    let task_mode = TaskMode::parse(&manifest.task_mode)?;
    let video_shape = [manifest.t, manifest.h, manifest.w, manifest.c];
    let mut samples = Vec::with_capacity(manifest.count);
    for rec in manifest.videos {
        let rgb = read_f32_tensor(&dir.join(&rec.file), &video_shape)?;
        let flow = rec
            .flow_file
            .as_ref()
            .map(|f| {
                read_f32_tensor(
                    &dir.join(f),
                    &[manifest.t, manifest.h, manifest.w, video::FLOW_CHANNELS],
                )
            })
            .transpose()?;
        let mask = rec
            .mask_file
            .as_ref()
            .map(|f| read_f32_tensor(&dir.join(f), &[manifest.h, manifest.w]))
            .transpose()?;
        samples.push(Sample {
            video: Video { rgb, flow },
            label: rec.label,
            spec: rec.spec,
            mask,
        });
    }
    Ok(Dataset {
        task_mode,
        dims: VideoDims {
            frames: manifest.t,
            height: manifest.h,
            width: manifest.w,
        },
        palettes: manifest.palettes,
        samples,
    })
}
