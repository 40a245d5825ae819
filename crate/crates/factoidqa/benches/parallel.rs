//! Benchmarks comparing the rayon data-parallel paths against their
//! sequential fallbacks: BioASQ conversion, featurization, and the model
//! forward pass.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use factoidqa::convert::{explode_all, explode_all_seq};
use factoidqa::corpus::BioasqQuestion;
use factoidqa::featurize::{encode_pairs, encode_pairs_seq, EncodeOptions, FeaturizedExample};
use factoidqa::model::{ModelConfig, SpanBackend, SpanModel};
use factoidqa::synth::marker_span_task;
use factoidqa::tokenize::{Tokenizer, ToyWordPiece};

/// Synthetic BioASQ questions built from the marker task, one snippet per
/// question.
fn marker_questions(n: usize) -> Vec<BioasqQuestion> {
    let task = marker_span_task(n, 60, 7).unwrap();
    let json = serde_json::json!({
        "questions": task.pairs.iter().map(|pair| {
            serde_json::json!({
                "id": pair.question_id,
                "type": "factoid",
                "body": pair.question,
                "exact_answer": [[pair.gold.as_ref().unwrap().text]],
                "snippets": [{ "text": pair.passage }],
            })
        }).collect::<Vec<_>>()
    });
    serde_json::from_value::<Vec<BioasqQuestion>>(json["questions"].clone()).unwrap()
}

fn bench_explode(c: &mut Criterion) {
    let questions = marker_questions(400);
    let mut group = c.benchmark_group("explode_all");
    group.sample_size(30);
    group.bench_function("parallel", |b| {
        b.iter(|| explode_all(black_box(&questions), true).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| explode_all_seq(black_box(&questions), true).unwrap())
    });
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let task = marker_span_task(400, 60, 7).unwrap();
    let corpus: Vec<&str> = task.corpus.iter().map(|s| s.as_str()).collect();
    let tokenizer = ToyWordPiece::build(&corpus, task.vocab_budget()).unwrap();
    let opts = EncodeOptions::with_max_seq_len(32);
    let mut group = c.benchmark_group("encode_pairs");
    group.sample_size(30);
    group.bench_function("parallel", |b| {
        b.iter(|| encode_pairs(black_box(&task.pairs), &tokenizer, &opts).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| encode_pairs_seq(black_box(&task.pairs), &tokenizer, &opts).unwrap())
    });
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let task = marker_span_task(32, 60, 7).unwrap();
    let corpus: Vec<&str> = task.corpus.iter().map(|s| s.as_str()).collect();
    let tokenizer = ToyWordPiece::build(&corpus, task.vocab_budget()).unwrap();
    let opts = EncodeOptions::with_max_seq_len(32);
    let batch = encode_pairs(&task.pairs, &tokenizer, &opts).unwrap();
    let refs: Vec<&FeaturizedExample> = batch.examples.iter().collect();
    let config = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        max_positions: 32,
        hidden: 64,
        num_layers: 2,
        num_heads: 4,
        ffn_dim: 128,
        segments: 2,
        dropout: 0.1,
        layer_norm_eps: 1e-12,
        init_std: 0.02,
    };
    let model = SpanModel::new(config, 7).unwrap();
    let mut group = c.benchmark_group("forward_batch32");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| model.forward(black_box(&refs)).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| model.forward_seq(black_box(&refs)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_explode, bench_encode, bench_forward);
criterion_main!(benches);
