//! Checkpoint file format: 8-byte magic `SDCK0001`, a little-endian u64
//! manifest length, the manifest JSON (descriptor, epoch, rng state,
//! shapes), then the parameter blob -- binary32 little-endian, parameters
//! in declaration order followed by the optimizer momentum buffers.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{ArchitectureDescriptor, Model};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SDCK0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    descriptor: ArchitectureDescriptor,
    epoch: usize,
    rng: StreamRng,
    param_shapes: Vec<Vec<usize>>,
}

/// A reloadable training snapshot.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub descriptor: ArchitectureDescriptor,
    pub epoch: usize,
    pub rng: StreamRng,
    pub params: Vec<Tensor<f32>>,
    pub momentum: Vec<Tensor<f32>>,
}

impl ModelCheckpoint {
    pub fn capture<S: Scalar>(
        model: &Model<S>,
        momentum: &[Tensor<S>],
        epoch: usize,
        rng: &StreamRng,
    ) -> Self {
        ModelCheckpoint {
            descriptor: model.descriptor,
            epoch,
            rng: rng.clone(),
            params: model.params().iter().map(|p| p.cast()).collect(),
            momentum: momentum.iter().map(|m| m.cast()).collect(),
        }
    }

    /// Rebuilds the network and loads the stored parameters into it.
    pub fn to_model<S: Scalar>(&self) -> Model<S> {
        let mut model = Model::init(self.descriptor, &StreamRng::new(0, "checkpoint-restore"));
        for (slot, stored) in model.params_mut().into_iter().zip(&self.params) {
            *slot = stored.cast();
        }
        model
    }

    pub fn momentum_as<S: Scalar>(&self) -> Vec<Tensor<S>> {
        self.momentum.iter().map(|m| m.cast()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            descriptor: self.descriptor,
            epoch: self.epoch,
            rng: self.rng.clone(),
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let manifest_json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest_json);
        for tensor in self.params.iter().chain(&self.momentum) {
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelCheckpoint> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(name, 0, "bad checkpoint magic"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + manifest_len {
            return Err(Error::format(
                name,
                bytes.len() as u64,
                "truncated manifest",
            ));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
            .map_err(|e| Error::format(name.clone(), 16, e.to_string()))?;
        let blob = &bytes[16 + manifest_len..];
        let total: usize = manifest
            .param_shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        if blob.len() != 2 * total * 4 {
            return Err(Error::format(
                name,
                (16 + manifest_len + blob.len()) as u64,
                format!("blob holds {} bytes, expected {}", blob.len(), 2 * total * 4),
            ));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut offset = 0;
        let mut read_set = |shapes: &[Vec<usize>]| -> Result<Vec<Tensor<f32>>> {
            shapes
                .iter()
                .map(|shape| {
                    let len: usize = shape.iter().product();
                    let t = Tensor::from_vec(shape, floats[offset..offset + len].to_vec());
                    offset += len;
                    t
                })
                .collect()
        };
        let params = read_set(&manifest.param_shapes)?;
        let momentum = read_set(&manifest.param_shapes)?;
        Ok(ModelCheckpoint {
            descriptor: manifest.descriptor,
            epoch: manifest.epoch,
            rng: manifest.rng,
            params,
            momentum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{ArchitectureDescriptor, Targets};
    use crate::video::{render_with_flow, sample_spec, DynamicFactor, StaticFactor};

    fn video() -> crate::video::Video<f32> {
        let mut rng = StreamRng::new(1, "ckpt-video");
        let spec = sample_spec(
            4,
            8,
            8,
            StaticFactor {
                palette: 2,
                texture: 1,
                shape: 1,
            },
            DynamicFactor {
                direction_bin: 3,
                speed: 1,
                flicker_period: 2,
            },
            0,
            false,
            &mut rng,
        );
        render_with_flow(&spec)
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let rng = StreamRng::new(9, "ckpt");
        let descriptor = ArchitectureDescriptor {
            widths: [2, 3],
            ..ArchitectureDescriptor::single(4)
        };
        let model: Model<f32> = Model::init(descriptor, &rng);
        let momentum = model.zero_grads();
        let ckpt = ModelCheckpoint::capture(&model, &momentum, 7, &rng);
        let path = dir.path().join("model.sdck");
        ckpt.save(&path).unwrap();
        let loaded = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert_eq!(loaded.descriptor, descriptor);
        assert_eq!(loaded.rng, rng);
        for (a, b) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(a, b);
        }

        // forward of the restored model is bitwise equal
        let restored: Model<f32> = loaded.to_model();
        let v = video();
        let (out_a, _) = model.forward(&[v.clone()], false).unwrap();
        let (out_b, _) = restored.forward(&[v.clone()], false).unwrap();
        assert_eq!(out_a.logits(), out_b.logits());
        let _ = model.loss(&[v], &Targets::Classes(&[1])).unwrap();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sdck");
        fs::write(&path, b"NOTMAGIC________").unwrap();
        assert!(ModelCheckpoint::load(&path).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rng = StreamRng::new(10, "ckpt");
        let model: Model<f32> = Model::init(
            ArchitectureDescriptor {
                widths: [2, 2],
                ..ArchitectureDescriptor::single(2)
            },
            &rng,
        );
        let ckpt = ModelCheckpoint::capture(&model, &model.zero_grads(), 0, &rng);
        let path = dir.path().join("trunc.sdck");
        ckpt.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match ModelCheckpoint::load(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
