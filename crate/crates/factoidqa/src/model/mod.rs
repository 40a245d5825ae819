//! Span-prediction transformer encoder with manual backpropagation in f64.
//!
//! The architecture is the post-norm BERT layout: token, position, and
//! segment embeddings summed and layer-normalized, a stack of encoder blocks
//! (multi-head self-attention and a GELU feed-forward, each followed by a
//! residual connection and layer norm), and an affine head projecting each
//! position to start/end span logits. Parameters are partitioned into layer
//! groups (embedding block, one group per encoder layer counted from the
//! bottom, task head) so schedules can freeze and unfreeze them wholesale.

mod checkpoint;
mod decode;
mod encoder;
mod optim;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::FeaturizedExample;
use crate::par;
use crate::tokenize::PAD_ID;

pub use decode::{decode, decode_with_null};
pub use optim::AdamConfig;

use encoder::ParamSet;
use optim::AdamState;

const INIT_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_layer_norm_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_segments() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.1
}

fn default_layer_norm_eps() -> f64 {
    1e-12
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Six-layer distilled-BERT shape (cased vocabulary of 28996 entries,
    /// hidden 768, 12 heads, feed-forward 3072, 512 positions).
    pub fn distilbert_shaped() -> ModelConfig {
        ModelConfig {
            vocab_size: 28996,
            max_positions: 512,
            hidden: 768,
            num_layers: 6,
            num_heads: 12,
            ffn_dim: 3072,
            segments: default_segments(),
            dropout: default_dropout(),
            layer_norm_eps: default_layer_norm_eps(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config(
                "vocab_size must cover at least the special tokens",
            ));
        }
        for (name, v) in [
            ("max_positions", self.max_positions),
            ("hidden", self.hidden),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("segments", self.segments),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden {} must be divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::config(
                "layer_norm_eps and init_std must be positive",
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count per layer group. Matches the tensors the
    /// model actually allocates; computing it arithmetically keeps parameter
    /// audits cheap for shapes too large to instantiate.
    pub fn group_parameter_counts(&self) -> BTreeMap<LayerGroup, usize> {
        let d = self.hidden;
        let mut counts = BTreeMap::new();
        let embedding = self.vocab_size * d + self.max_positions * d + self.segments * d + 2 * d;
        counts.insert(LayerGroup::Embedding, embedding);
        // Four attention projections, two layer norms, and the two
        // feed-forward projections, all with biases.
        let per_layer = 4 * (d * d + d)
            + 2 * (2 * d)
            + (d * self.ffn_dim + self.ffn_dim)
            + (self.ffn_dim * d + d);
        for layer in 1..=self.num_layers {
            counts.insert(LayerGroup::Transformer(layer), per_layer);
        }
        counts.insert(LayerGroup::Head, d * 2 + 2);
        counts
    }

    pub fn total_parameters(&self) -> usize {
        self.group_parameter_counts().values().sum()
    }
}

/// Unit of freezing. Transformer layers are numbered from 1 at the bottom
/// (nearest the embeddings) to `num_layers` at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerGroup {
    Embedding,
    Transformer(usize),
    Head,
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerGroup::Embedding => f.write_str("embedding"),
            LayerGroup::Transformer(i) => write!(f, "layer_{i}"),
            LayerGroup::Head => f.write_str("head"),
        }
    }
}

impl FromStr for LayerGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<LayerGroup> {
        match s {
            "embedding" => Ok(LayerGroup::Embedding),
            "head" => Ok(LayerGroup::Head),
            _ => {
                let idx = s
                    .strip_prefix("layer_")
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .filter(|&i| i >= 1)
                    .ok_or_else(|| Error::validation(format!("unknown layer group name {s:?}")))?;
                Ok(LayerGroup::Transformer(idx))
            }
        }
    }
}

impl Serialize for LayerGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LayerGroup::from_str(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-position span logits for one example; both vectors have the
/// example's sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanScores {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

/// One decoded candidate span, with its surface text recovered from the
/// original passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub pair_id: String,
    pub start_token: usize,
    pub end_token: usize,
    pub probability: f64,
    pub text: String,
}

/// Training loss for one example: the mean of start and end cross-entropies,
/// each a softmax over the example's non-pad positions. Uniform logits over
/// n positions therefore give exactly ln n.
pub fn span_loss(scores: &SpanScores, example: &FeaturizedExample) -> Result<f64> {
    let gold = example.gold_span.ok_or_else(|| {
        Error::validation(format!("example {} has no gold span", example.pair_id))
    })?;
    let valid = valid_positions(example);
    let (loss, _, _) = loss_and_dlogits(scores, gold, &valid, &example.pair_id)?;
    Ok(loss)
}

fn valid_positions(example: &FeaturizedExample) -> Vec<bool> {
    example.input_ids.iter().map(|&id| id != PAD_ID).collect()
}

/// Returns (loss, d_start_logits, d_end_logits) for one example; the
/// gradients are for the unweighted per-example loss.
fn loss_and_dlogits(
    scores: &SpanScores,
    gold: (usize, usize),
    valid: &[bool],
    pair_id: &str,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = scores.start_logits.len();
    if scores.end_logits.len() != n || valid.len() != n {
        return Err(Error::validation(format!(
            "example {pair_id}: inconsistent sequence lengths"
        )));
    }
    for (name, idx) in [("start", gold.0), ("end", gold.1)] {
        if idx >= n || !valid[idx] {
            return Err(Error::validation(format!(
                "example {pair_id}: gold {name} index {idx} is out of range"
            )));
        }
    }

    let mut loss = 0.0;
    let mut d_start = vec![0.0; n];
    let mut d_end = vec![0.0; n];
    for (logits, gold_idx, dl) in [
        (&scores.start_logits, gold.0, &mut d_start),
        (&scores.end_logits, gold.1, &mut d_end),
    ] {
        let mut max = f64::NEG_INFINITY;
        for (t, &l) in logits.iter().enumerate() {
            if valid[t] && l > max {
                max = l;
            }
        }
        let mut denom = 0.0;
        for (t, &l) in logits.iter().enumerate() {
            if valid[t] {
                denom += (l - max).exp();
            }
        }
        let log_denom = denom.ln() + max;
        loss += 0.5 * (log_denom - logits[gold_idx]);
        for (t, &l) in logits.iter().enumerate() {
            if valid[t] {
                let softmax = (l - max).exp() / denom;
                dl[t] = 0.5 * (softmax - if t == gold_idx { 1.0 } else { 0.0 });
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical(format!(
            "example {pair_id}: non-finite loss"
        )));
    }
    Ok((loss, d_start, d_end))
}

/// Anything that can stand in for the span model during training: forward
/// scoring, grouped parameter bookkeeping, freezing, one optimizer step over
/// a minibatch, and checkpointing.
pub trait SpanBackend {
    fn config(&self) -> &ModelConfig;
    fn forward(&self, batch: &[&FeaturizedExample]) -> Result<Vec<SpanScores>>;
    fn parameter_groups(&self) -> BTreeMap<LayerGroup, usize>;
    fn set_trainable(&mut self, groups: &BTreeSet<LayerGroup>) -> Result<()>;
    fn trainable(&self) -> BTreeSet<LayerGroup>;
    fn train_batch(&mut self, batch: &[&FeaturizedExample], adam: &AdamConfig) -> Result<f64>;
    fn save(&self, path: &Path) -> Result<()>;
}

#[derive(Debug)]
pub struct SpanModel {
    config: ModelConfig,
    params: ParamSet,
    trainable: BTreeSet<LayerGroup>,
    adam: Option<AdamState>,
    dropout_rng: ChaCha20Rng,
}

impl SpanModel {
    /// Fresh model with normal(0, init_std) weights. The seed drives both
    /// initialization and the dropout stream; everything downstream of the
    /// same seed is bit-exact reproducible.
    pub fn new(config: ModelConfig, seed: u64) -> Result<SpanModel> {
        config.validate()?;
        let mut init_rng = ChaCha20Rng::seed_from_u64(seed);
        init_rng.set_stream(INIT_STREAM);
        let params = ParamSet::init(&config, &mut init_rng);
        let mut dropout_rng = ChaCha20Rng::seed_from_u64(seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        let trainable = all_groups(&config);
        Ok(SpanModel {
            config,
            params,
            trainable,
            adam: None,
            dropout_rng,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SpanModel> {
        checkpoint::load(path.as_ref())
    }

    /// Checkpoint key strings (`group.tensor` form) in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.params
            .tensors()
            .into_iter()
            .map(|t| t.key_string())
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.params
            .tensors()
            .into_iter()
            .find(|t| t.key_string() == name)
            .map(|t| t.data as &[f64])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params
            .tensors_mut()
            .into_iter()
            .find(|t| t.key_string() == name)
            .map(|t| t.data as &mut [f64])
    }

    /// Drops accumulated Adam moments and step counts, as at a stage
    /// boundary where the parameters carry over but the optimizer restarts.
    pub fn reset_optimizer(&mut self) {
        self.adam = None;
    }

    fn check_example(&self, example: &FeaturizedExample) -> Result<()> {
        let n = example.input_ids.len();
        if n == 0 {
            return Err(Error::validation(format!(
                "example {} is empty",
                example.pair_id
            )));
        }
        if n > self.config.max_positions {
            return Err(Error::validation(format!(
                "example {} has {} positions but the model supports {}",
                example.pair_id, n, self.config.max_positions
            )));
        }
        if example.segment_ids.len() != n
            || example.passage_mask.len() != n
            || example.offset_map.len() != n
        {
            return Err(Error::validation(format!(
                "example {}: field lengths disagree",
                example.pair_id
            )));
        }
        for &id in &example.input_ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::validation(format!(
                    "example {}: token id {} exceeds vocab size {}",
                    example.pair_id, id, self.config.vocab_size
                )));
            }
        }
        for &seg in &example.segment_ids {
            if seg as usize >= self.config.segments {
                return Err(Error::validation(format!(
                    "example {}: segment id {} exceeds segment count {}",
                    example.pair_id, seg, self.config.segments
                )));
            }
        }
        Ok(())
    }

    /// Sequential twin of [`SpanBackend::forward`] for benchmarking the
    /// parallel dispatch against single-threaded execution.
    pub fn forward_seq(&self, batch: &[&FeaturizedExample]) -> Result<Vec<SpanScores>> {
        for example in batch {
            self.check_example(example)?;
        }
        par::map_slice_seq(batch, |example| {
            encoder::forward_scores(&self.params, &self.config, example, None)
        })
        .into_iter()
        .collect()
    }

    /// Mean loss over a batch without dropout or parameter updates.
    pub fn batch_loss(&self, batch: &[&FeaturizedExample]) -> Result<f64> {
        let scores = self.forward(batch)?;
        let mut total = 0.0;
        for (example, scores) in batch.iter().zip(&scores) {
            total += span_loss(scores, example)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean batch loss plus analytic gradients for every tensor, keyed by
    /// checkpoint name. Dropout is disabled so finite-difference checks see
    /// a deterministic function of the parameters.
    pub fn loss_and_gradients(
        &self,
        batch: &[&FeaturizedExample],
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::validation("loss_and_gradients on an empty batch"));
        }
        for example in batch {
            self.check_example(example)?;
        }
        let weight = 1.0 / batch.len() as f64;
        let results = par::map_slice(batch, |example| {
            encoder::example_gradients(&self.params, &self.config, example, weight, 0, true, None)
        });
        let mut grads = ParamSet::zeros(&self.config);
        let mut total = 0.0;
        for result in results {
            let (loss, example_grads) = result?;
            total += loss;
            grads.add_assign(&example_grads);
        }
        let named = grads
            .tensors()
            .into_iter()
            .map(|t| (t.key_string(), t.data.clone()))
            .collect();
        Ok((total * weight, named))
    }

    fn backward_depth(&self) -> (usize, bool) {
        let embedding = self.trainable.contains(&LayerGroup::Embedding);
        if embedding {
            return (0, true);
        }
        let lowest = self
            .trainable
            .iter()
            .filter_map(|g| match g {
                LayerGroup::Transformer(i) => Some(i - 1),
                _ => None,
            })
            .min()
            .unwrap_or(self.config.num_layers);
        (lowest, false)
    }
}

fn all_groups(config: &ModelConfig) -> BTreeSet<LayerGroup> {
    let mut groups = BTreeSet::new();
    groups.insert(LayerGroup::Embedding);
    for i in 1..=config.num_layers {
        groups.insert(LayerGroup::Transformer(i));
    }
    groups.insert(LayerGroup::Head);
    groups
}

impl SpanBackend for SpanModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, batch: &[&FeaturizedExample]) -> Result<Vec<SpanScores>> {
        for example in batch {
            self.check_example(example)?;
        }
        par::map_slice(batch, |example| {
            encoder::forward_scores(&self.params, &self.config, example, None)
        })
        .into_iter()
        .collect()
    }

    fn parameter_groups(&self) -> BTreeMap<LayerGroup, usize> {
        let mut counts = BTreeMap::new();
        for tensor in self.params.tensors() {
            *counts.entry(tensor.key.group).or_insert(0) += tensor.data.len();
        }
        counts
    }

    fn set_trainable(&mut self, groups: &BTreeSet<LayerGroup>) -> Result<()> {
        let known = all_groups(&self.config);
        for group in groups {
            if !known.contains(group) {
                return Err(Error::validation(format!(
                    "unknown layer group {group} for a {}-layer model",
                    self.config.num_layers
                )));
            }
        }
        if groups.is_empty() {
            return Err(Error::validation("trainable set cannot be empty"));
        }
        self.trainable = groups.clone();
        Ok(())
    }

    fn trainable(&self) -> BTreeSet<LayerGroup> {
        self.trainable.clone()
    }

    fn train_batch(&mut self, batch: &[&FeaturizedExample], adam: &AdamConfig) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::validation("train_batch on an empty batch"));
        }
        adam.validate()?;
        for example in batch {
            self.check_example(example)?;
        }

        // Per-example dropout seeds are drawn sequentially up front so the
        // parallel gradient pass stays deterministic.
        let seeds: Vec<u64> = (0..batch.len())
            .map(|_| rand::Rng::gen::<u64>(&mut self.dropout_rng))
            .collect();
        let weight = 1.0 / batch.len() as f64;
        let (lowest_layer, embedding) = self.backward_depth();
        let dropout = if self.config.dropout > 0.0 {
            Some(self.config.dropout)
        } else {
            None
        };

        let inputs: Vec<(usize, &FeaturizedExample)> = batch.iter().copied().enumerate().collect();
        let results = par::map_slice(&inputs, |(i, example)| {
            encoder::example_gradients(
                &self.params,
                &self.config,
                example,
                weight,
                lowest_layer,
                embedding,
                dropout.map(|p| (p, seeds[*i])),
            )
        });

        // Gradients are summed in example order, not thread-completion
        // order, to keep results bit-exact regardless of parallelism.
        let mut grads = ParamSet::zeros(&self.config);
        let mut total = 0.0;
        for result in results {
            let (loss, example_grads) = result?;
            total += loss;
            grads.add_assign(&example_grads);
        }
        let mean_loss = total * weight;
        if !mean_loss.is_finite() {
            return Err(Error::numerical("non-finite batch loss"));
        }

        let adam_state = self
            .adam
            .get_or_insert_with(|| AdamState::new(&self.config));
        adam_state.apply(&mut self.params, &grads, &self.trainable, adam)?;
        Ok(mean_loss)
    }

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }
}

#[cfg(test)]
mod tests;
