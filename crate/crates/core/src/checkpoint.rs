//! Self-describing JSON checkpoints.
//!
//! Floats are written with round-trip precision, so loading a checkpoint
//! restores parameters bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::params::{ModelParams, Params};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

pub const FORMAT: &str = "attnlink-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub step: u64,
    /// Non-reserved tokens in id order.
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

fn flatten(p: &ModelParams) -> Vec<NamedTensor> {
    p.named()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn unflatten(cfg: &ModelConfig, tensors: &[NamedTensor]) -> Result<ModelParams> {
    let layout = Params::shapes(cfg);
    let expected = layout.named();
    if expected.len() != tensors.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, config implies {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(tensors.len());
    for ((name, shape), t) in expected.into_iter().zip(tensors) {
        if t.name != name || &t.shape != shape {
            return Err(Error::invalid(format!(
                "checkpoint tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                t.name, t.shape
            )));
        }
        values.push(Tensor::new(t.shape.clone(), t.data.clone())?);
    }
    layout.rebuild(values)
}

impl Checkpoint {
    pub fn new(
        model: &ModelConfig,
        train: Option<&TrainConfig>,
        seed: u64,
        params: &ModelParams,
        adam: Option<&AdamState>,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.clone(),
            train: train.cloned(),
            seed,
            step: adam.map_or(0, |a| a.step),
            src_vocab: src_vocab.content_tokens().to_vec(),
            tgt_vocab: tgt_vocab.content_tokens().to_vec(),
            params: flatten(params),
            optimizer: adam.map(|a| OptimizerState {
                step: a.step,
                m: flatten(&a.m),
                v: flatten(&a.v),
            }),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        unflatten(&self.model, &self.params)
    }

    pub fn adam(&self) -> Result<Option<AdamState>> {
        self.optimizer
            .as_ref()
            .map(|o| {
                Ok(AdamState {
                    step: o.step,
                    m: unflatten(&self.model, &o.m)?,
                    v: unflatten(&self.model, &o.v)?,
                })
            })
            .transpose()
    }

    pub fn vocabs(&self) -> Result<(Vocab, Vocab)> {
        Ok((
            Vocab::from_tokens(self.src_vocab.iter().cloned())?,
            Vocab::from_tokens(self.tgt_vocab.iter().cloned())?,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        ck.model.validate()?;
        ck.params()?;
        Ok(ck)
    }
}
