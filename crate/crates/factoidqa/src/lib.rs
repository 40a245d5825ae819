//! Factoid extractive question-answering with transfer learning.
//!
//! The crate covers the full desk-scale pipeline: converting BioASQ-style
//! question/snippet corpora into SQuAD-style span-labeled pairs, featurizing
//! them for a span-prediction transformer encoder, staged fine-tuning with
//! gradual layer-group unfreezing, decoding and aggregating top-5 answers per
//! question, and rank-based evaluation (strict accuracy, lenient accuracy,
//! MRR) with paired significance testing across batches.
//!
//! All randomized steps are driven by explicit seeds and produce bit-exact
//! reproducible results. Data-parallel hot paths (featurization, forward
//! passes, decoding) run on rayon when the default `parallel` feature is
//! enabled; sequential variants are always compiled and benchmarked against
//! the parallel ones in `benches/parallel.rs`.

// Validations are written as `!(x > 0.0)` so NaN fails them too; the
// `x <= 0.0` form clippy prefers would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod convert;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod model;
pub mod par;
pub mod schedule;
pub mod stats;
pub mod synth;
pub mod textutil;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
