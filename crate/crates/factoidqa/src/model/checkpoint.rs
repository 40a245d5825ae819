//! Model checkpointing as versioned, self-describing JSON.
//!
//! The file records the config, every parameter tensor keyed by
//! `group.tensor` with its shape, the optimizer moments and per-group step
//! counts when training has started, and the dropout RNG state. f64 values
//! survive the JSON round trip exactly (shortest-representation printing
//! parses back to the identical bits), so save/load/resume is bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::encoder::ParamSet;
use super::optim::AdamState;
use super::{LayerGroup, ModelConfig, SpanModel};

const FORMAT: &str = "factoidqa.checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerBlob {
    m: BTreeMap<String, TensorBlob>,
    v: BTreeMap<String, TensorBlob>,
    group_steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    trainable: Vec<String>,
    tensors: BTreeMap<String, TensorBlob>,
    optimizer: Option<OptimizerBlob>,
    dropout_rng: ChaCha20Rng,
}

fn params_to_blobs(params: &ParamSet) -> BTreeMap<String, TensorBlob> {
    params
        .tensors()
        .into_iter()
        .map(|t| {
            (
                t.key_string(),
                TensorBlob {
                    shape: t.shape,
                    data: t.data.clone(),
                },
            )
        })
        .collect()
}

fn params_from_blobs(
    cfg: &ModelConfig,
    blobs: &BTreeMap<String, TensorBlob>,
    what: &str,
) -> Result<ParamSet> {
    let mut params = ParamSet::zeros(cfg);
    let mut expected = BTreeSet::new();
    for tensor in params.tensors_mut() {
        let name = tensor.key_string();
        let blob = blobs.get(&name).ok_or_else(|| {
            Error::validation(format!("checkpoint {what} is missing tensor {name}"))
        })?;
        if blob.shape != tensor.shape {
            return Err(Error::validation(format!(
                "checkpoint {what} tensor {name} has shape {:?}, expected {:?}",
                blob.shape, tensor.shape
            )));
        }
        if blob.data.len() != tensor.data.len() {
            return Err(Error::validation(format!(
                "checkpoint {what} tensor {name} has {} values, expected {}",
                blob.data.len(),
                tensor.data.len()
            )));
        }
        tensor.data.copy_from_slice(&blob.data);
        expected.insert(name);
    }
    for name in blobs.keys() {
        if !expected.contains(name) {
            return Err(Error::validation(format!(
                "checkpoint {what} has unexpected tensor {name}"
            )));
        }
    }
    Ok(params)
}

pub(super) fn save(model: &SpanModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        trainable: model.trainable.iter().map(|g| g.to_string()).collect(),
        tensors: params_to_blobs(&model.params),
        optimizer: model.adam.as_ref().map(|adam| OptimizerBlob {
            m: params_to_blobs(&adam.m),
            v: params_to_blobs(&adam.v),
            group_steps: adam
                .group_steps
                .iter()
                .map(|(g, s)| (g.to_string(), *s))
                .collect(),
        }),
        dropout_rng: model.dropout_rng.clone(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::validation(format!("serializing checkpoint: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(super) fn load(path: &Path) -> Result<SpanModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    if file.format != FORMAT {
        return Err(Error::validation(format!(
            "{} is not a model checkpoint (format {:?})",
            path.display(),
            file.format
        )));
    }
    if file.version != VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint version {} (supported: {VERSION})",
            file.version
        )));
    }
    file.config.validate()?;

    let params = params_from_blobs(&file.config, &file.tensors, "parameters")?;
    let mut trainable = BTreeSet::new();
    for name in &file.trainable {
        trainable.insert(LayerGroup::from_str(name)?);
    }
    let adam = match file.optimizer {
        Some(blob) => {
            let mut group_steps = BTreeMap::new();
            for (name, steps) in &blob.group_steps {
                group_steps.insert(LayerGroup::from_str(name)?, *steps);
            }
            Some(AdamState {
                m: params_from_blobs(&file.config, &blob.m, "optimizer m")?,
                v: params_from_blobs(&file.config, &blob.v, "optimizer v")?,
                group_steps,
            })
        }
        None => None,
    };

    Ok(SpanModel {
        config: file.config,
        params,
        trainable,
        adam,
        dropout_rng: file.dropout_rng,
    })
}
