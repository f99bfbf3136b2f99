//! Checkpoint archives.
//!
//! A checkpoint is a safetensors file. Tensors are keyed by layer path under
//! `params.`, `buffers.` (batch-norm running statistics) and `optim.`
//! (momentum buffers); the header metadata entry [`META_KEY`] holds a JSON
//! [`CheckpointMeta`]. Values are stored as little-endian `f32`, so a save and
//! load round trip is bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::model::{Classifier, ModelSpec};
use crate::nn::{check_shapes, TensorStore};
use crate::rng::RngState;

pub const META_KEY: &str = "consistency_at";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelSpec,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_pgd10: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Metrics of the epoch this checkpoint closes.
    pub metrics: Option<MetricsRow>,
    pub rng: RngState,
    /// Resolved training configuration.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Classifier,
    /// SGD momentum buffers, keyed like the parameters.
    pub momentum: Option<TensorStore<f32>>,
    pub meta: CheckpointMeta,
}

fn bytes_of(values: &ArrayD<f32>) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |prefix: &str, store: &TensorStore<f32>| {
            for (name, v) in store.names.iter().zip(&store.values) {
                owned.push((format!("{prefix}.{name}"), v.shape().to_vec(), bytes_of(v)));
            }
        };
        push("params", &self.model.net.params);
        push("buffers", &self.model.net.buffers);
        if let Some(m) = &self.momentum {
            push("optim", m);
        }
        let views = owned
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("missing `{META_KEY}` metadata")))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let mut model = Classifier::new(meta.model.clone(), RngState::new(0))?;
        let mut momentum: Option<TensorStore<f32>> = None;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut seen_params = 0;
        let mut seen_buffers = 0;
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            let (prefix, key) = name
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has no section prefix")))?;
            match prefix {
                "params" => {
                    let i = check_shapes(&model.net.params, key, view.shape())?;
                    model.net.params.values[i] = array;
                    seen_params += 1;
                }
                "buffers" => {
                    let i = check_shapes(&model.net.buffers, key, view.shape())?;
                    model.net.buffers.values[i] = array;
                    seen_buffers += 1;
                }
                "optim" => {
                    let m = momentum.get_or_insert_with(|| model.net.params.zeros_like());
                    let i = check_shapes(m, key, view.shape())?;
                    m.values[i] = array;
                }
                other => return Err(Error::Checkpoint(format!("unknown tensor section `{other}`"))),
            }
        }
        if seen_params != model.net.params.len() || seen_buffers != model.net.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen_params}/{} parameters and {seen_buffers}/{} buffers of `{}`",
                model.net.params.len(),
                model.net.buffers.len(),
                meta.model.arch
            )));
        }
        Ok(Self { model, momentum, meta })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Replaces `path` with `bytes` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut model = Classifier::new(ModelSpec::new("tiny_cnn", 3, (3, 8, 8)).with_cifar_normalization(), RngState::new(4)).unwrap();
        model.net.buffers.values[0].mapv_inplace(|v| v + 0.123_456_79);
        let mut momentum = model.net.params.zeros_like();
        momentum.values[1].fill(-1.5e-7);
        Checkpoint {
            model: model.clone(),
            momentum: Some(momentum),
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config_hash: "abc".into(),
                model: model.spec.clone(),
                epoch: 3,
                global_step: 17,
                best_pgd10: Some(12.5),
                best_epoch: Some(2),
                metrics: None,
                rng: RngState::new(9).split(3),
                config: None,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, c.meta);
        for (a, b) in back.model.net.params.values.iter().zip(&c.model.net.params.values) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.model.net.buffers, c.model.net.buffers);
        assert_eq!(back.momentum, c.momentum);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn architecture_mismatch_is_descriptive() {
        let mut c = sample();
        let bytes = c.to_bytes().unwrap();
        let mut bad = Checkpoint::from_bytes(&bytes).unwrap();
        bad.meta.model.num_classes = 5;
        c.meta = bad.meta;
        let err = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
    }
}
