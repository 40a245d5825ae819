//! Span decoding: from per-position logits to ranked candidate answers.

use crate::error::{Error, Result};
use crate::featurize::{token_span_to_text, FeaturizedExample};

use super::{SpanPrediction, SpanScores};

/// Enumerates candidate spans (s, e) with s <= e < s + max_answer_len over
/// passage tokens only, scoring each by softmax_start(s) * softmax_end(e)
/// where both softmaxes range over the passage positions. Candidates come
/// back sorted by probability, ties broken by smaller start, then shorter
/// span, truncated to `top_k`.
pub fn decode(
    scores: &SpanScores,
    example: &FeaturizedExample,
    max_answer_len: usize,
    top_k: usize,
) -> Result<Vec<SpanPrediction>> {
    decode_impl(scores, example, max_answer_len, top_k, false).map(|(spans, _)| spans)
}

/// Variant for no-answer training data: additionally reports the
/// probability of the ([CLS], [CLS]) span under softmaxes that include the
/// [CLS] position, as used when an example may be unanswerable. The
/// candidate list itself still covers passage spans only.
pub fn decode_with_null(
    scores: &SpanScores,
    example: &FeaturizedExample,
    max_answer_len: usize,
    top_k: usize,
) -> Result<(Vec<SpanPrediction>, f64)> {
    let (spans, null) = decode_impl(scores, example, max_answer_len, top_k, true)?;
    Ok((spans, null.expect("null probability requested")))
}

fn decode_impl(
    scores: &SpanScores,
    example: &FeaturizedExample,
    max_answer_len: usize,
    top_k: usize,
    with_null: bool,
) -> Result<(Vec<SpanPrediction>, Option<f64>)> {
    let n = example.input_ids.len();
    if scores.start_logits.len() != n || scores.end_logits.len() != n {
        return Err(Error::validation(format!(
            "example {}: score length does not match the sequence",
            example.pair_id
        )));
    }
    if max_answer_len == 0 || top_k == 0 {
        return Err(Error::config(
            "max_answer_len and top_k must both be positive",
        ));
    }

    // Softmax support: passage positions, plus [CLS] (position 0) when the
    // null score is wanted. No passage tokens means no candidates.
    let mut support: Vec<usize> = Vec::with_capacity(n);
    if with_null && !example.passage_mask.first().copied().unwrap_or(false) {
        support.push(0);
    }
    support.extend((0..n).filter(|&t| example.passage_mask[t]));
    if support.iter().all(|&t| !example.passage_mask[t]) {
        let null = with_null.then_some(if support.is_empty() { 0.0 } else { 1.0 });
        return Ok((Vec::new(), null));
    }

    let p_start = softmax_over(&scores.start_logits, &support);
    let p_end = softmax_over(&scores.end_logits, &support);

    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (si, &s) in support.iter().enumerate() {
        if !example.passage_mask[s] {
            continue;
        }
        for (ei, &e) in support.iter().enumerate().skip(si) {
            if !example.passage_mask[e] {
                continue;
            }
            if e - s + 1 > max_answer_len {
                break;
            }
            candidates.push((s, e, p_start[si] * p_end[ei]));
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("softmax probabilities are finite")
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| (a.1 - a.0).cmp(&(b.1 - b.0)))
    });
    candidates.truncate(top_k);

    let mut spans = Vec::with_capacity(candidates.len());
    for (s, e, probability) in candidates {
        spans.push(SpanPrediction {
            pair_id: example.pair_id.clone(),
            start_token: s,
            end_token: e,
            probability,
            text: token_span_to_text(example, (s, e))?,
        });
    }

    let null = with_null.then(|| {
        let cls = support.iter().position(|&t| t == 0);
        match cls {
            Some(idx) => p_start[idx] * p_end[idx],
            None => 0.0,
        }
    });
    Ok((spans, null))
}

fn softmax_over(logits: &[f64], support: &[usize]) -> Vec<f64> {
    let max = support
        .iter()
        .map(|&t| logits[t])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = support.iter().map(|&t| (logits[t] - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}
