//! Synthetic marker-span task generator for end-to-end checks. Each passage
//! hides an answer span between two fixed marker words, so a span model can
//! learn the task from scratch while the whole pipeline (tokenization,
//! featurization, training, decoding, aggregation) runs exactly as it does
//! on real data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::convert::{GoldSpan, QAPair};
use crate::error::{Error, Result};
use crate::textutil::char_len;

pub const MARKER_START: &str = "mstart";
pub const MARKER_END: &str = "mend";
pub const QUESTION: &str = "which words are marked";

const MAX_AFFIX_WORDS: usize = 5;
const MAX_SPAN_WORDS: usize = 3;

/// A generated task: one pair per question, plus the corpus lines a
/// tokenizer should be built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub pairs: Vec<QAPair>,
    pub corpus: Vec<String>,
}

impl SynthTask {
    /// Vocabulary budget that keeps every corpus word whole under the toy
    /// tokenizer's ranking: specials, then both piece forms of every
    /// character, then the whole words.
    pub fn vocab_budget(&self) -> usize {
        let mut chars = std::collections::BTreeSet::new();
        let mut words = std::collections::BTreeSet::new();
        for line in &self.corpus {
            for (word, _, _) in crate::tokenize::split_words(line) {
                for ch in word.chars() {
                    chars.insert(ch);
                }
                words.insert(word);
            }
        }
        crate::tokenize::SPECIAL_TOKENS.len() + 2 * chars.len() + words.len()
    }
}

/// Generates `n` labeled pairs over a pool of `vocab_words` filler words
/// (`w0`, `w1`, ...). Each passage is `prefix MARKER_START span MARKER_END
/// suffix` with 0..=5 prefix and suffix words and a 1..=3 word span, all
/// drawn uniformly; the gold answer is the span between the markers. The
/// question is constant, so the markers carry all the signal. Output is a
/// pure function of `(n, vocab_words, seed)`.
pub fn marker_span_task(n: usize, vocab_words: usize, seed: u64) -> Result<SynthTask> {
    if n == 0 {
        return Err(Error::config("marker_span_task requires n >= 1"));
    }
    if vocab_words == 0 {
        return Err(Error::config(
            "marker_span_task requires a non-empty word pool",
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    let mut corpus = Vec::with_capacity(n + 1);
    corpus.push(QUESTION.to_string());
    for i in 0..n {
        let question_id = format!("synth{i:04}");
        let prefix_len = rng.gen_range(0..=MAX_AFFIX_WORDS);
        let span_len = rng.gen_range(1..=MAX_SPAN_WORDS);
        let suffix_len = rng.gen_range(0..=MAX_AFFIX_WORDS);
        let mut draw = |count: usize| -> Vec<String> {
            (0..count)
                .map(|_| format!("w{}", rng.gen_range(0..vocab_words)))
                .collect()
        };
        let prefix = draw(prefix_len);
        let span = draw(span_len);
        let suffix = draw(suffix_len);

        let mut passage = String::new();
        let mut cursor = 0usize;
        let mut push_word = |passage: &mut String, word: &str| -> usize {
            if !passage.is_empty() {
                passage.push(' ');
                cursor += 1;
            }
            let start = cursor;
            passage.push_str(word);
            cursor += char_len(word);
            start
        };
        for word in &prefix {
            push_word(&mut passage, word);
        }
        push_word(&mut passage, MARKER_START);
        let mut span_start = 0;
        for (j, word) in span.iter().enumerate() {
            let start = push_word(&mut passage, word);
            if j == 0 {
                span_start = start;
            }
        }
        push_word(&mut passage, MARKER_END);
        for word in &suffix {
            push_word(&mut passage, word);
        }

        let text = span.join(" ");
        debug_assert_eq!(
            crate::textutil::char_slice(&passage, span_start, span_start + char_len(&text))
                .as_deref(),
            Some(text.as_str())
        );
        corpus.push(passage.clone());
        pairs.push(QAPair {
            pair_id: format!("{question_id}_s0"),
            question_id,
            question: QUESTION.to_string(),
            passage,
            gold: Some(GoldSpan {
                text,
                start_char: span_start,
            }),
        });
    }
    Ok(SynthTask { pairs, corpus })
}
