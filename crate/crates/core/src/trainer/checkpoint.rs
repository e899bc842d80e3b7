//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `SMOECKPT`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor payload as little-endian `f64` values in the
//! order of the manifest's tensor directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RoutingRecord;
use crate::moe::LayerRouting;
use crate::numerics::Tensor;

use super::config::RunConfig;
use super::model::Model;

pub const MAGIC: &[u8; 8] = b"SMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
    /// Number of `f64` values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    epoch: usize,
    config: RunConfig,
    train_loss: Option<f64>,
    eval_loss: f64,
    tau: f64,
    eval_fingerprint: String,
    parameters: usize,
    h_star: Vec<Option<usize>>,
    tensors: Vec<TensorEntry>,
}

/// Parameters, routing record and loss scalars after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: RunConfig,
    pub params: Vec<(String, Tensor)>,
    pub record: RoutingRecord,
    /// Mean training loss of the epoch; absent for the initial checkpoint.
    pub train_loss: Option<f64>,
    /// Mean cross-entropy on the frozen evaluation set.
    pub eval_loss: f64,
    /// Similarity temperature used during the epoch.
    pub tau: f64,
    /// Hash of the evaluation batch the record was taken on.
    pub eval_fingerprint: String,
}

fn routing_tensor_names(layer: usize) -> [String; 3] {
    [
        format!("routing.layer{layer}.scores"),
        format!("routing.layer{layer}.selected"),
        format!("routing.layer{layer}.weights"),
    ]
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        config: &RunConfig,
        epoch: usize,
        record: RoutingRecord,
        train_loss: Option<f64>,
        eval_loss: f64,
        tau: f64,
    ) -> Self {
        Self {
            eval_fingerprint: String::new(),
            epoch,
            config: config.clone(),
            params: model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            record,
            train_loss,
            eval_loss,
            tau,
        }
    }

    pub fn eval_perplexity(&self) -> f64 {
        self.eval_loss.exp()
    }

    /// Rebuilds the model stored in this checkpoint.
    pub fn model(&self) -> Result<Model> {
        Model::from_tensors(&self.config.model, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = self.params.clone();
        for (l, layer) in self.record.layers.iter().enumerate() {
            let [scores, selected, weights] = routing_tensor_names(l);
            let k = layer.weights.cols();
            let sel: Vec<f64> = layer.selected.iter().flat_map(|s| s.iter().map(|&e| e as f64)).collect();
            if sel.len() != layer.selected.len() * k {
                return Err(Error::Format(format!("layer {l} has ragged expert selections")));
            }
            tensors.push((scores, layer.scores.clone()));
            tensors.push((selected, Tensor::new(vec![layer.selected.len(), k], sel)?));
            tensors.push((weights, layer.weights.clone()));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len: t.numel(),
            });
            offset += 8 * t.numel();
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            train_loss: self.train_loss,
            eval_loss: self.eval_loss,
            tau: self.tau,
            eval_fingerprint: self.eval_fingerprint.clone(),
            parameters: self.params.len(),
            h_star: self.record.layers.iter().map(|l| l.h_star).collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", manifest.format_version)));
        }
        let payload = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Format(format!("tensor '{}' has dtype {}", e.name, e.dtype)));
            }
            let raw = payload
                .get(e.offset..e.offset + 8 * e.len)
                .ok_or_else(|| Error::Format(format!("tensor '{}' runs past the payload", e.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        if manifest.parameters > tensors.len() {
            return Err(Error::Format("tensor directory shorter than parameter count".into()));
        }
        let routing = tensors.split_off(manifest.parameters);
        if routing.len() != 3 * manifest.h_star.len() {
            return Err(Error::Format("routing tensors do not match the layer count".into()));
        }
        let mut layers = Vec::with_capacity(manifest.h_star.len());
        for (l, (chunk, h_star)) in routing.chunks_exact(3).zip(&manifest.h_star).enumerate() {
            let names = routing_tensor_names(l);
            if chunk.iter().zip(&names).any(|((n, _), want)| n != want) {
                return Err(Error::Format(format!("routing tensors of layer {l} are out of order")));
            }
            let sel = &chunk[1].1;
            let selected = (0..sel.rows())
                .map(|i| sel.row(i).iter().map(|&v| v as usize).collect())
                .collect();
            layers.push(LayerRouting {
                scores: chunk[0].1.clone(),
                selected,
                weights: chunk[2].1.clone(),
                h_star: *h_star,
            });
        }
        Ok(Self {
            epoch: manifest.epoch,
            config: manifest.config,
            params: tensors,
            record: RoutingRecord {
                epoch: manifest.epoch,
                layers,
            },
            train_loss: manifest.train_loss,
            eval_loss: manifest.eval_loss,
            tau: manifest.tau,
            eval_fingerprint: manifest.eval_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
