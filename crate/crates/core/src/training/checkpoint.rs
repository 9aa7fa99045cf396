//! Versioned checkpoints: a JSON manifest followed by little-endian blobs.
//!
//! Layout: magic `CSCK`, format version (u32), manifest length (u64),
//! manifest JSON, payload. Manifest entries give each blob's dotted name,
//! section (`param`, `adam_m`, `adam_v`), dtype code, shape and payload offset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Scalar, Tensor};

use super::optim::{AdamW, OptimState};

const MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    section: String,
    dtype: u8,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    epochs_completed: usize,
    seed: u64,
    best_score: Option<f64>,
    optimizer: AdamW,
    optimizer_step: u64,
    entries: Vec<Entry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub epochs_completed: usize,
    pub seed: u64,
    pub best_score: Option<f64>,
    pub optimizer: AdamW,
    pub params: ParamStore<f32>,
    pub optim_state: Option<OptimState<f32>>,
}

const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, section: &str, t: &Tensor<f32>| {
            entries.push(Entry {
                name: name.to_string(),
                section: section.to_string(),
                dtype: f32::DTYPE as u8,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        };
        for (name, t) in self.params.iter() {
            push(name, SECTIONS[0], t);
        }
        if let Some(state) = &self.optim_state {
            for (section, moments) in [(SECTIONS[1], &state.m), (SECTIONS[2], &state.v)] {
                for ((name, _), t) in self.params.iter().zip(moments) {
                    push(name, section, t);
                }
            }
        }
        let manifest = Manifest {
            model: self.model.clone(),
            epochs_completed: self.epochs_completed,
            seed: self.seed,
            best_score: self.best_score,
            optimizer: self.optimizer,
            optimizer_step: self.optim_state.as_ref().map_or(0, |s| s.step),
            entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let payload = &bytes[16 + len..];
        let mut sections: [Vec<(String, Tensor<f32>)>; 3] = Default::default();
        for e in &manifest.entries {
            if DType::from_code(e.dtype) != Some(DType::F32) {
                return Err(Error::Format(format!("`{}` has unsupported dtype code {}", e.name, e.dtype)));
            }
            let start = e.offset as usize;
            let end = start + numel(&e.shape) * 4;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("blob `{}` lies outside the payload", e.name)))?;
            let t = Tensor::new(e.shape.clone(), raw.chunks_exact(4).map(f32::read_le).collect())?;
            let slot = SECTIONS
                .iter()
                .position(|s| *s == e.section)
                .ok_or_else(|| Error::Format(format!("unknown section `{}`", e.section)))?;
            sections[slot].push((e.name.clone(), t));
        }
        let [params, m, v] = sections;
        let mut store = ParamStore::new();
        for (name, t) in params {
            store.insert(name, t)?;
        }
        let optim_state = if m.is_empty() && v.is_empty() {
            None
        } else {
            let names_match = |sec: &[(String, Tensor<f32>)]| {
                sec.len() == store.len() && sec.iter().zip(store.names()).all(|((a, _), b)| a == b)
            };
            if !names_match(&m) || !names_match(&v) {
                return Err(Error::Format("optimizer moments do not match the parameters".into()));
            }
            Some(OptimState {
                step: manifest.optimizer_step,
                m: m.into_iter().map(|(_, t)| t).collect(),
                v: v.into_iter().map(|(_, t)| t).collect(),
            })
        };
        Ok(Checkpoint {
            model: manifest.model,
            epochs_completed: manifest.epochs_completed,
            seed: manifest.seed,
            best_score: manifest.best_score,
            optimizer: manifest.optimizer,
            params: store,
            optim_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless `reference` (a freshly built model's store) has the same
    /// parameter names and shapes in the same order.
    pub fn check_compatible<T: Scalar>(&self, reference: &ParamStore<T>) -> Result<()> {
        if self.params.len() != reference.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                reference.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.params.iter().zip(reference.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{a}` {:?} does not match model parameter `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}
