//! Turning question/passage pairs into model inputs.
//!
//! The default layout is `[CLS] question [SEP] passage [SEP]` with segment
//! ids 0 over the question half and 1 over the passage half. The passage is
//! truncated to fit the length budget; labeled pairs whose gold span does
//! not survive truncation are dropped with their ids reported. A windowed
//! encoder with configurable stride exists for long contexts.

use serde::{Deserialize, Serialize};

use crate::convert::QAPair;
use crate::corpus::SquadQA;
use crate::error::{Error, Result};
use crate::par;
use crate::textutil::char_slice;
use crate::tokenize::{Token, Tokenizer, CLS_ID, SEP_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub max_seq_len: usize,
    /// Question tokens before passage tokens (the default). The passage-first
    /// variant swaps the halves; masks and offsets follow the passage
    /// wherever it sits.
    pub question_first: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            max_seq_len: 512,
            question_first: true,
        }
    }
}

impl EncodeOptions {
    pub fn with_max_seq_len(max_seq_len: usize) -> EncodeOptions {
        EncodeOptions {
            max_seq_len,
            ..EncodeOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_seq_len < 8 {
            return Err(Error::config(format!(
                "max_seq_len must be at least 8, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

/// One encoded example. `offset_map` gives, for each passage token position,
/// the code-point range it covers in `passage`; `gold_span` is a token index
/// pair (start, end) inclusive, or ([CLS], [CLS]) = (0, 0) for a labeled
/// no-answer example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedExample {
    pub pair_id: String,
    pub input_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub passage_mask: Vec<bool>,
    pub offset_map: Vec<Option<(usize, usize)>>,
    pub gold_span: Option<(usize, usize)>,
    pub passage: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodeOutcome {
    Encoded(FeaturizedExample),
    /// The pair was labeled but its gold span fell outside the truncated
    /// passage window.
    GoldTruncated {
        pair_id: String,
    },
}

enum GoldKind<'a> {
    Unlabeled,
    Span { text: &'a str, start_char: usize },
    NoAnswer,
}

/// Encodes one question/snippet pair.
pub fn encode_pair(
    pair: &QAPair,
    tokenizer: &dyn Tokenizer,
    opts: &EncodeOptions,
) -> Result<EncodeOutcome> {
    let gold = match &pair.gold {
        Some(gold) => GoldKind::Span {
            text: &gold.text,
            start_char: gold.start_char,
        },
        None => GoldKind::Unlabeled,
    };
    encode_parts(
        &pair.pair_id,
        &pair.question,
        &pair.passage,
        gold,
        tokenizer,
        opts,
    )
}

/// Encodes one SQuAD record: the first answer becomes the gold span;
/// impossible records become ([CLS], [CLS]) no-answer examples; records
/// without answers stay unlabeled.
pub fn encode_squad(
    qa: &SquadQA,
    tokenizer: &dyn Tokenizer,
    opts: &EncodeOptions,
) -> Result<EncodeOutcome> {
    let gold = if qa.is_impossible {
        GoldKind::NoAnswer
    } else {
        match qa.answers.first() {
            Some(answer) => GoldKind::Span {
                text: &answer.text,
                start_char: answer.answer_start,
            },
            None => GoldKind::Unlabeled,
        }
    };
    encode_parts(&qa.id, &qa.question, &qa.context, gold, tokenizer, opts)
}

fn encode_parts(
    pair_id: &str,
    question: &str,
    passage: &str,
    gold: GoldKind<'_>,
    tokenizer: &dyn Tokenizer,
    opts: &EncodeOptions,
) -> Result<EncodeOutcome> {
    opts.validate()?;
    let q_tokens = tokenizer.tokenize(question);
    let p_tokens = tokenizer.tokenize(passage);
    let budget = passage_budget(pair_id, q_tokens.len(), opts.max_seq_len)?;
    let kept = p_tokens.len().min(budget);
    build_example(
        pair_id,
        passage,
        &q_tokens,
        &p_tokens[..kept],
        gold,
        opts.question_first,
    )
}

/// Passage token budget after [CLS], two [SEP]s, and the question; zero
/// room is an error because the example would carry no passage at all.
fn passage_budget(pair_id: &str, q_len: usize, max_seq_len: usize) -> Result<usize> {
    if q_len + 3 >= max_seq_len {
        return Err(Error::validation(format!(
            "pair {pair_id}: question occupies {q_len} tokens, leaving no room for the \
             passage within max_seq_len {max_seq_len}"
        )));
    }
    Ok(max_seq_len - 3 - q_len)
}

fn build_example(
    pair_id: &str,
    passage: &str,
    q_tokens: &[Token],
    p_tokens: &[Token],
    gold: GoldKind<'_>,
    question_first: bool,
) -> Result<EncodeOutcome> {
    let n = q_tokens.len() + p_tokens.len() + 3;
    let mut input_ids = Vec::with_capacity(n);
    let mut segment_ids = Vec::with_capacity(n);
    let mut passage_mask = Vec::with_capacity(n);
    let mut offset_map: Vec<Option<(usize, usize)>> = Vec::with_capacity(n);
    let mut passage_start = 0usize;

    let push = |id: u32,
                seg: u8,
                offset: Option<(usize, usize)>,
                input_ids: &mut Vec<u32>,
                segment_ids: &mut Vec<u8>,
                passage_mask: &mut Vec<bool>,
                offset_map: &mut Vec<Option<(usize, usize)>>| {
        input_ids.push(id);
        segment_ids.push(seg);
        passage_mask.push(offset.is_some());
        offset_map.push(offset);
    };

    push(
        CLS_ID,
        0,
        None,
        &mut input_ids,
        &mut segment_ids,
        &mut passage_mask,
        &mut offset_map,
    );
    let halves: [(&[Token], bool); 2] = if question_first {
        [(q_tokens, false), (p_tokens, true)]
    } else {
        [(p_tokens, true), (q_tokens, false)]
    };
    for (half_idx, (tokens, is_passage)) in halves.iter().enumerate() {
        let seg = half_idx as u8;
        if *is_passage {
            passage_start = input_ids.len();
        }
        for token in *tokens {
            let offset = is_passage.then_some((token.begin, token.end));
            push(
                token.id,
                seg,
                offset,
                &mut input_ids,
                &mut segment_ids,
                &mut passage_mask,
                &mut offset_map,
            );
        }
        push(
            SEP_ID,
            seg,
            None,
            &mut input_ids,
            &mut segment_ids,
            &mut passage_mask,
            &mut offset_map,
        );
    }

    let gold_span = match gold {
        GoldKind::Unlabeled => None,
        GoldKind::NoAnswer => Some((0, 0)),
        GoldKind::Span { text, start_char } => {
            let end_char = start_char + crate::textutil::char_len(text);
            match map_gold(p_tokens, start_char, end_char) {
                Some((s, e)) => Some((passage_start + s, passage_start + e)),
                None => {
                    return Ok(EncodeOutcome::GoldTruncated {
                        pair_id: pair_id.to_string(),
                    })
                }
            }
        }
    };

    Ok(EncodeOutcome::Encoded(FeaturizedExample {
        pair_id: pair_id.to_string(),
        input_ids,
        segment_ids,
        passage_mask,
        offset_map,
        gold_span,
        passage: passage.to_string(),
    }))
}

/// Minimal window of passage tokens covering the gold character span, or
/// `None` when the kept tokens do not fully cover it.
fn map_gold(p_tokens: &[Token], start_char: usize, end_char: usize) -> Option<(usize, usize)> {
    let s = p_tokens.iter().position(|t| t.end > start_char)?;
    let e = p_tokens.iter().rposition(|t| t.begin < end_char)?;
    if s > e || p_tokens[s].begin > start_char || p_tokens[e].end < end_char {
        return None;
    }
    Some((s, e))
}

/// Recovers the passage text covered by a token span (inclusive indices).
pub fn token_span_to_text(example: &FeaturizedExample, span: (usize, usize)) -> Result<String> {
    let (s, e) = span;
    if s > e || e >= example.input_ids.len() {
        return Err(Error::validation(format!(
            "example {}: span ({s}, {e}) is malformed",
            example.pair_id
        )));
    }
    if !example.passage_mask[s] || !example.passage_mask[e] {
        return Err(Error::validation(format!(
            "example {}: span ({s}, {e}) leaves the passage",
            example.pair_id
        )));
    }
    let (begin, _) = example.offset_map[s].expect("passage token has offsets");
    let (_, end) = example.offset_map[e].expect("passage token has offsets");
    char_slice(&example.passage, begin, end).ok_or_else(|| {
        Error::validation(format!(
            "example {}: offsets ({begin}, {end}) overflow the passage",
            example.pair_id
        ))
    })
}

/// Batch outcome: encoded examples plus the ids of dropped labeled pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodeBatch {
    pub examples: Vec<FeaturizedExample>,
    pub dropped: Vec<String>,
}

pub fn encode_pairs<T: Tokenizer + Sync>(
    pairs: &[QAPair],
    tokenizer: &T,
    opts: &EncodeOptions,
) -> Result<EncodeBatch> {
    collect_outcomes(par::map_slice(pairs, |p| encode_pair(p, tokenizer, opts)))
}

/// Sequential variant of [`encode_pairs`] for benchmarking.
pub fn encode_pairs_seq<T: Tokenizer>(
    pairs: &[QAPair],
    tokenizer: &T,
    opts: &EncodeOptions,
) -> Result<EncodeBatch> {
    collect_outcomes(par::map_slice_seq(pairs, |p| {
        encode_pair(p, tokenizer, opts)
    }))
}

pub fn encode_squad_records<T: Tokenizer + Sync>(
    records: &[SquadQA],
    tokenizer: &T,
    opts: &EncodeOptions,
) -> Result<EncodeBatch> {
    collect_outcomes(par::map_slice(records, |r| {
        encode_squad(r, tokenizer, opts)
    }))
}

fn collect_outcomes(outcomes: Vec<Result<EncodeOutcome>>) -> Result<EncodeBatch> {
    let mut batch = EncodeBatch::default();
    for outcome in outcomes {
        match outcome? {
            EncodeOutcome::Encoded(example) => batch.examples.push(example),
            EncodeOutcome::GoldTruncated { pair_id } => batch.dropped.push(pair_id),
        }
    }
    Ok(batch)
}

/// Windowed encoding for contexts longer than the budget: windows of passage
/// tokens starting every `stride` tokens, ids suffixed `#w{index}`. Labeled
/// pairs keep the gold span in windows that fully contain it and are
/// unlabeled elsewhere.
pub fn encode_pair_windows(
    pair: &QAPair,
    tokenizer: &dyn Tokenizer,
    opts: &EncodeOptions,
    stride: usize,
) -> Result<Vec<FeaturizedExample>> {
    opts.validate()?;
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let q_tokens = tokenizer.tokenize(&pair.question);
    let p_tokens = tokenizer.tokenize(&pair.passage);
    let budget = passage_budget(&pair.pair_id, q_tokens.len(), opts.max_seq_len)?;
    if stride > budget {
        return Err(Error::config(format!(
            "stride {stride} exceeds the passage budget {budget}; windows would skip tokens"
        )));
    }

    let mut out = Vec::new();
    let mut start = 0usize;
    let mut index = 0usize;
    loop {
        let window = &p_tokens[start..p_tokens.len().min(start + budget)];
        let window_id = format!("{}#w{index}", pair.pair_id);
        let gold = match &pair.gold {
            Some(gold) => GoldKind::Span {
                text: &gold.text,
                start_char: gold.start_char,
            },
            None => GoldKind::Unlabeled,
        };
        match build_example(
            &window_id,
            &pair.passage,
            &q_tokens,
            window,
            gold,
            opts.question_first,
        )? {
            EncodeOutcome::Encoded(example) => out.push(example),
            EncodeOutcome::GoldTruncated { .. } => {
                // This window does not contain the answer; emit it unlabeled
                // so prediction still sees the text.
                if let EncodeOutcome::Encoded(example) = build_example(
                    &window_id,
                    &pair.passage,
                    &q_tokens,
                    window,
                    GoldKind::Unlabeled,
                    opts.question_first,
                )? {
                    out.push(example);
                }
            }
        }
        if start + budget >= p_tokens.len() {
            break;
        }
        start += stride;
        index += 1;
    }
    Ok(out)
}
