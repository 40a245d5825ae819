//! Toy WordPiece tokenizer.
//!
//! Text is lowercased (length-preserving), pre-split on whitespace with each
//! punctuation character its own word, then each word is segmented by greedy
//! longest-match against the vocabulary, continuation pieces carrying the
//! `##` prefix. A word that cannot be segmented becomes a single `[UNK]`
//! token spanning the whole word. Token offsets always refer to the original
//! text and count code points.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textutil::lowercase_preserving_len;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

/// One tokenized piece: vocabulary id plus the half-open code-point range
/// `[begin, end)` it covers in the original text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub begin: usize,
    pub end: usize,
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn vocab_size(&self) -> usize;
    fn id_of(&self, token: &str) -> Option<u32>;
    fn token_text(&self, id: u32) -> Option<&str>;
}

#[derive(Debug, Clone)]
pub struct ToyWordPiece {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
}

impl ToyWordPiece {
    /// Builds a vocabulary from raw text lines. The four special tokens come
    /// first (ids 0..=3), then single-character pieces in both initial and
    /// continuation form, then whole words, each ranked by corpus frequency
    /// with lexicographic tie-breaks, truncated to `vocab_size` entries.
    ///
    /// Single characters are ranked ahead of whole words so that any word
    /// over the corpus alphabet stays segmentable even with a small budget.
    pub fn build<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<ToyWordPiece> {
        if vocab_size < SPECIAL_TOKENS.len() + 2 {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} cannot hold the special tokens plus any pieces"
            )));
        }

        let mut word_freq: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for (word, _, _) in split_words(line.as_ref()) {
                *word_freq.entry(word).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::validation(
                "cannot build a vocabulary from an empty corpus",
            ));
        }

        let mut char_freq: HashMap<char, u64> = HashMap::new();
        for (word, freq) in &word_freq {
            for ch in word.chars() {
                *char_freq.entry(ch).or_insert(0) += freq;
            }
        }

        let mut chars: Vec<(char, u64)> = char_freq.into_iter().collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut words: Vec<(String, u64)> = word_freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for (ch, _) in &chars {
            if vocab.len() + 2 > vocab_size {
                break;
            }
            vocab.push(ch.to_string());
            vocab.push(format!("##{ch}"));
        }
        for (word, _) in &words {
            if vocab.len() >= vocab_size {
                break;
            }
            if word.chars().count() >= 2 {
                vocab.push(word.clone());
            }
        }

        ToyWordPiece::from_vocab(vocab)
    }

    /// Wraps an explicit vocabulary: entry i gets id i. The first four
    /// entries must be the special tokens in their pinned order.
    pub fn from_vocab(vocab: Vec<String>) -> Result<ToyWordPiece> {
        if vocab.len() < SPECIAL_TOKENS.len() {
            return Err(Error::validation("vocabulary is missing special tokens"));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab[i] != *expected {
                return Err(Error::validation(format!(
                    "vocabulary entry {i} must be {expected}, got {:?}",
                    vocab[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, token) in vocab.iter().enumerate() {
            if token.is_empty() {
                return Err(Error::validation(format!("vocabulary entry {i} is empty")));
            }
            if ids.insert(token.clone(), i as u32).is_some() {
                return Err(Error::validation(format!(
                    "duplicate vocabulary entry {token:?}"
                )));
            }
        }
        Ok(ToyWordPiece { vocab, ids })
    }

    /// Writes the vocabulary as one token per line; the line number is the id.
    pub fn save_vocab(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.vocab.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_vocab(path: impl AsRef<Path>) -> Result<ToyWordPiece> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vec<String> = text.lines().map(str::to_owned).collect();
        ToyWordPiece::from_vocab(vocab)
            .map_err(|e| Error::parse(path, format!("invalid vocabulary: {e}")))
    }

    fn segment_word(&self, word: &str) -> Option<Vec<(usize, u32)>> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut pos = 0usize;
        while pos < chars.len() {
            let mut matched = None;
            for len in (1..=chars.len() - pos).rev() {
                let piece: String = chars[pos..pos + len].iter().collect();
                let candidate = if pos == 0 {
                    piece
                } else {
                    format!("##{piece}")
                };
                if let Some(&id) = self.ids.get(&candidate) {
                    matched = Some((len, id));
                    break;
                }
            }
            match matched {
                Some((len, id)) => {
                    pieces.push((len, id));
                    pos += len;
                }
                None => return None,
            }
        }
        Some(pieces)
    }
}

impl Tokenizer for ToyWordPiece {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        for (word, begin, end) in split_words(text) {
            match self.segment_word(&word) {
                Some(pieces) => {
                    let mut offset = begin;
                    for (len, id) in pieces {
                        tokens.push(Token {
                            id,
                            begin: offset,
                            end: offset + len,
                        });
                        offset += len;
                    }
                }
                None => tokens.push(Token {
                    id: UNK_ID,
                    begin,
                    end,
                }),
            }
        }
        tokens
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    fn token_text(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }
}

/// Splits lowercased text into words with code-point offsets into the
/// original: maximal alphanumeric runs, plus one word per punctuation
/// character. Whitespace only separates.
pub fn split_words(text: &str) -> Vec<(String, usize, usize)> {
    let lowered = lowercase_preserving_len(text);
    let mut words = Vec::new();
    let mut current = String::new();
    let mut current_begin = 0usize;
    for (i, ch) in lowered.chars().enumerate() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push((std::mem::take(&mut current), current_begin, i));
            }
        } else if ch.is_alphanumeric() {
            if current.is_empty() {
                current_begin = i;
            }
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push((std::mem::take(&mut current), current_begin, i));
            }
            words.push((ch.to_string(), i, i + 1));
        }
    }
    if !current.is_empty() {
        let end = lowered.chars().count();
        words.push((current, current_begin, end));
    }
    words
}
