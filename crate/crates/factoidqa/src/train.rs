//! Staged fine-tuning orchestration: seeded, checkpointed epochs with an
//! optional unfreezing schedule, run manifests with config and dataset
//! hashes, hyperparameter presets, and batch prediction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::FeaturizedExample;
use crate::model::{AdamConfig, ModelConfig, SpanBackend, SpanModel, SpanPrediction};
use crate::schedule::{self, UnfreezeSchedule};

/// RNG stream for epoch shuffles; streams 0 and 2 belong to model
/// initialization and dropout.
const SHUFFLE_STREAM: u64 = 1;

/// Mixes the epoch ordinal into the master seed so each epoch's shuffle is
/// independent of how many epochs ran before it (resume equivalence).
const EPOCH_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;
pub const DEFAULT_TOP_K: usize = 20;

/// Hyperparameters for one fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Label for the dataset this stage trains on, echoed into manifests.
    pub dataset: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub schedule: Option<UnfreezeSchedule>,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_seq_len < 8 {
            return Err(Error::config(format!(
                "max_seq_len must be at least 8, got {}",
                self.max_seq_len
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if let Some(schedule) = &self.schedule {
            schedule.validate()?;
            if schedule.num_epochs() != self.epochs {
                return Err(Error::config(format!(
                    "schedule has {} phases but the stage runs {} epochs",
                    schedule.num_epochs(),
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Phase ordinal driving this epoch; 1 throughout when no schedule.
    pub phase: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub mean_loss: f64,
    pub examples_seen: usize,
}

/// Record of one `run_stage` invocation, written as JSON next to the
/// checkpoints. Re-running with the same inputs reproduces the same final
/// parameters bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: StageConfig,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub model: ModelConfig,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub wall_clock_secs: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash over featurized examples, independent of file layout.
pub fn dataset_sha256(examples: &[FeaturizedExample]) -> Result<String> {
    let mut hasher = Sha256::new();
    for example in examples {
        let bytes = serde_json::to_vec(example)
            .map_err(|e| Error::validation(format!("hashing example: {e}")))?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn config_sha256(cfg: &StageConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)
        .map_err(|e| Error::validation(format!("hashing stage config: {e}")))?;
    Ok(sha256_hex(&bytes))
}

fn shuffle_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ EPOCH_SEED_MIX.wrapping_mul(epoch as u64));
    rng.set_stream(SHUFFLE_STREAM);
    order.shuffle(&mut rng);
    order
}

fn append_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut text = if path.exists() {
        String::new()
    } else {
        "epoch,phase,trainable_params,mean_loss\n".to_string()
    };
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.phase, row.trainable_params, row.mean_loss
        ));
    }
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Trains `backend` on `examples` for epochs `start_epoch..=cfg.epochs`.
///
/// Each epoch applies its schedule phase (or marks every group trainable),
/// shuffles with an epoch-keyed seeded RNG, and steps Adam over minibatches
/// at a constant learning rate, keeping the last partial minibatch. Every
/// epoch is checkpointed (`epoch_NNN.ckpt`), the final state is saved as
/// `final.ckpt`, metrics append to `metrics.csv`, and the manifest is
/// written to `manifest.json` in `out_dir`.
///
/// `start_epoch` > 1 resumes a run whose earlier epochs already happened on
/// this backend: epoch seeds depend only on (seed, epoch), so a resumed run
/// retraces the original batch order exactly.
pub fn run_stage<B: SpanBackend>(
    backend: &mut B,
    examples: &[FeaturizedExample],
    cfg: &StageConfig,
    out_dir: &Path,
    start_epoch: usize,
) -> Result<RunManifest> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::validation("run_stage needs a non-empty dataset"));
    }
    if start_epoch == 0 || start_epoch > cfg.epochs {
        return Err(Error::config(format!(
            "start_epoch {} is outside 1..={}",
            start_epoch, cfg.epochs
        )));
    }
    for example in examples {
        if example.input_ids.len() > cfg.max_seq_len {
            return Err(Error::validation(format!(
                "example {} has {} tokens, over the stage max_seq_len {}",
                example.pair_id,
                example.input_ids.len(),
                cfg.max_seq_len
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let started = Instant::now();
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start_epoch..=cfg.epochs {
        let (phase, trainable_params, total_params) = match &cfg.schedule {
            Some(schedule) => {
                let phase = schedule.phase_at(epoch)?;
                let (trainable, total) = schedule::apply(backend, phase)?;
                (phase.epoch, trainable, total)
            }
            None => {
                let all: std::collections::BTreeSet<_> =
                    backend.parameter_groups().keys().cloned().collect();
                backend.set_trainable(&all)?;
                let total = backend.parameter_groups().values().sum();
                (1, total, total)
            }
        };

        let order = shuffle_order(examples.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeaturizedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mean_loss = backend.train_batch(&batch, &adam)?;
            loss_sum += mean_loss * batch.len() as f64;
        }
        let mean_loss = loss_sum / examples.len() as f64;

        let checkpoint = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
        backend.save(&checkpoint)?;
        checkpoints.push(checkpoint);
        metrics.push(EpochMetrics {
            epoch,
            phase,
            trainable_params,
            total_params,
            mean_loss,
            examples_seen: examples.len(),
        });
        eprintln!(
            "epoch {epoch}/{}: phase {phase}, trainable {trainable_params}/{total_params}, \
             mean loss {mean_loss:.6}",
            cfg.epochs
        );
    }

    let final_checkpoint = out_dir.join("final.ckpt");
    backend.save(&final_checkpoint)?;
    append_metrics_csv(&out_dir.join("metrics.csv"), &metrics)?;

    let manifest = RunManifest {
        config: cfg.clone(),
        config_sha256: config_sha256(cfg)?,
        dataset_sha256: dataset_sha256(examples)?,
        model: backend.config().clone(),
        epochs: metrics,
        checkpoints,
        final_checkpoint: final_checkpoint.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("serializing manifest: {e}")))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Result of a two-stage run: per-stage manifests plus the stage-2 final
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub stage1: RunManifest,
    pub stage2: RunManifest,
    pub final_checkpoint: PathBuf,
}

/// Staged fine-tuning: stage 1 trains a fresh model (seeded by
/// `stage1.seed`), stage 2 initializes from stage 1's final checkpoint with
/// fresh optimizer state and trains under its own config, typically the one
/// carrying an unfreezing schedule. Outputs land in `out_dir/stage1` and
/// `out_dir/stage2`.
pub fn two_stage(
    model: &ModelConfig,
    stage1: (&[FeaturizedExample], &StageConfig),
    stage2: (&[FeaturizedExample], &StageConfig),
    out_dir: &Path,
) -> Result<TwoStageReport> {
    stage1.1.validate()?;
    stage2.1.validate()?;

    let mut first = SpanModel::new(model.clone(), stage1.1.seed)?;
    let manifest1 = run_stage(&mut first, stage1.0, stage1.1, &out_dir.join("stage1"), 1)?;
    drop(first);

    let mut second = SpanModel::load(&manifest1.final_checkpoint)?;
    second.reset_optimizer();
    let manifest2 = run_stage(&mut second, stage2.0, stage2.1, &out_dir.join("stage2"), 1)?;

    let final_checkpoint = manifest2.final_checkpoint.clone();
    Ok(TwoStageReport {
        stage1: manifest1,
        stage2: manifest2,
        final_checkpoint,
    })
}

/// Decodes up to `top_k` spans of at most `max_answer_len` tokens for every
/// example, keyed by pair id. Deterministic given the backend parameters.
pub fn predict<B: SpanBackend>(
    backend: &B,
    examples: &[FeaturizedExample],
    max_answer_len: usize,
    top_k: usize,
) -> Result<BTreeMap<String, Vec<SpanPrediction>>> {
    let mut out = BTreeMap::new();
    for chunk in examples.chunks(32) {
        let batch: Vec<&FeaturizedExample> = chunk.iter().collect();
        let scores = backend.forward(&batch)?;
        for (example, score) in chunk.iter().zip(&scores) {
            let spans = crate::model::decode(score, example, max_answer_len, top_k)?;
            if out.insert(example.pair_id.clone(), spans).is_some() {
                return Err(Error::validation(format!(
                    "duplicate pair id {} in prediction input",
                    example.pair_id
                )));
            }
        }
    }
    Ok(out)
}

/// Published fine-tuning presets. The ALBERT rows carry the four reported
/// hyperparameters; the DistilBERT rows pair the ALBERT 1 hyperparameters
/// with a full-fine-tune or gradual-unfreeze schedule sized to
/// `num_layers`. Dataset label and seed keep neutral defaults for the
/// caller to override.
pub fn preset(name: &str, num_layers: usize) -> Result<StageConfig> {
    let base = StageConfig {
        dataset: String::new(),
        learning_rate: 3e-5,
        batch_size: 4,
        max_seq_len: 512,
        epochs: 3,
        schedule: None,
        seed: DEFAULT_SEED,
    };
    let cfg = match name {
        "albert1" => base,
        "albert2" => StageConfig {
            learning_rate: 2e-5,
            epochs: 4,
            ..base
        },
        "albert3" => StageConfig {
            learning_rate: 1e-5,
            ..base
        },
        "distilbert-baseline" => StageConfig {
            schedule: Some(UnfreezeSchedule::full_finetune(num_layers, 3, false)?),
            ..base
        },
        "distilbert-unfreeze" => {
            let schedule = UnfreezeSchedule::gradual_top_down(num_layers, 3, true)?;
            StageConfig {
                epochs: schedule.num_epochs(),
                schedule: Some(schedule),
                ..base
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; expected albert1, albert2, albert3, \
                 distilbert-baseline, or distilbert-unfreeze"
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
