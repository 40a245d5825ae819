//! BioASQ to SQuAD conversion and the reverse aggregation of span
//! predictions back into ranked per-question answer lists.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    BioasqQuestion, QuestionType, SquadAnswer, SquadArticle, SquadEntry, SquadFile, SquadParagraph,
    SynonymGroups,
};
use crate::error::{Error, Result};
use crate::model::SpanPrediction;
use crate::par;
use crate::textutil::{char_find, char_find_ci, char_len, char_slice};

/// One question/snippet pair: the unit of featurization and prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    /// `{question_id}_s{snippet_index}`, with the index taken before any
    /// drops so ids stay stable provenance pointers.
    pub pair_id: String,
    pub question_id: String,
    pub question: String,
    pub passage: String,
    pub gold: Option<GoldSpan>,
}

/// A gold answer span within a passage, in code points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub text: String,
    pub start_char: usize,
}

impl GoldSpan {
    pub fn end_char(&self) -> usize {
        self.start_char + char_len(&self.text)
    }
}

/// Finds the first locatable synonym in `passage`. Groups are searched in
/// order, and within each group synonyms in order; for each candidate an
/// exact-case occurrence wins over the case-insensitive fallback. The
/// returned span copies the passage surface form, not the synonym.
pub fn locate_span(passage: &str, groups: &[Vec<String>]) -> Option<GoldSpan> {
    for group in groups {
        for synonym in group {
            if synonym.is_empty() {
                continue;
            }
            let found = char_find(passage, synonym).or_else(|| char_find_ci(passage, synonym));
            let Some(start) = found else { continue };
            let end = start + char_len(synonym);
            let text =
                char_slice(passage, start, end).expect("located span must lie within the passage");
            return Some(GoldSpan {
                text,
                start_char: start,
            });
        }
    }
    None
}

/// Per-question conversion report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExplodeReport {
    pub pairs: Vec<QAPair>,
    pub dropped: Vec<String>,
}

/// Explodes one factoid question into question/snippet pairs. When `labeled`
/// the gold span is located in each snippet and unlocatable pairs are dropped
/// (their ids reported); a labeled question without exact answers is an
/// error. Unlabeled conversion keeps every snippet.
pub fn explode(question: &BioasqQuestion, labeled: bool) -> Result<ExplodeReport> {
    if question.question_type != QuestionType::Factoid {
        return Err(Error::validation(format!(
            "question {}: explode expects factoid questions, got {}",
            question.id, question.question_type
        )));
    }
    let groups = if labeled {
        match &question.exact_answer {
            Some(groups) if !groups.is_empty() => Some(&groups.0),
            _ => {
                return Err(Error::validation(format!(
                    "question {}: labeled conversion requires a non-empty exact_answer",
                    question.id
                )))
            }
        }
    } else {
        None
    };

    let mut report = ExplodeReport::default();
    for (idx, snippet) in question.snippets.iter().enumerate() {
        let pair_id = format!("{}_s{}", question.id, idx);
        let gold = match groups {
            Some(groups) => match locate_span(&snippet.text, groups) {
                Some(span) => Some(span),
                None => {
                    report.dropped.push(pair_id);
                    continue;
                }
            },
            None => None,
        };
        report.pairs.push(QAPair {
            pair_id,
            question_id: question.id.clone(),
            question: question.body.clone(),
            passage: snippet.text.clone(),
            gold,
        });
    }
    Ok(report)
}

/// Explodes a batch of factoid questions, preserving question order in the
/// output. Questions are independent, so the per-question work is
/// data-parallel under the `parallel` feature.
pub fn explode_all(questions: &[BioasqQuestion], labeled: bool) -> Result<ExplodeReport> {
    let reports = par::map_slice(questions, |q| explode(q, labeled));
    collect_reports(reports)
}

/// Sequential variant of [`explode_all`] for benchmarking.
pub fn explode_all_seq(questions: &[BioasqQuestion], labeled: bool) -> Result<ExplodeReport> {
    let reports = par::map_slice_seq(questions, |q| explode(q, labeled));
    collect_reports(reports)
}

fn collect_reports(reports: Vec<Result<ExplodeReport>>) -> Result<ExplodeReport> {
    let mut merged = ExplodeReport::default();
    for report in reports {
        let report = report?;
        merged.pairs.extend(report.pairs);
        merged.dropped.extend(report.dropped);
    }
    Ok(merged)
}

/// Builds a SQuAD-style file from pairs: one article per question (title =
/// question id, first-seen order), one single-question paragraph per pair.
pub fn to_squad(pairs: &[QAPair]) -> SquadFile {
    let mut order: Vec<&str> = Vec::new();
    let mut by_question: HashMap<&str, Vec<&QAPair>> = HashMap::new();
    for pair in pairs {
        let slot = by_question.entry(&pair.question_id).or_default();
        if slot.is_empty() {
            order.push(&pair.question_id);
        }
        slot.push(pair);
    }

    let mut articles = Vec::with_capacity(order.len());
    for question_id in order {
        let paragraphs = by_question[question_id]
            .iter()
            .map(|pair| {
                let (answers, is_impossible) = match &pair.gold {
                    Some(gold) => (
                        vec![SquadAnswer {
                            text: gold.text.clone(),
                            answer_start: gold.start_char,
                        }],
                        false,
                    ),
                    None => (Vec::new(), false),
                };
                SquadParagraph {
                    context: pair.passage.clone(),
                    qas: vec![SquadEntry {
                        id: pair.pair_id.clone(),
                        question: pair.question.clone(),
                        answers,
                        is_impossible,
                        extra: Default::default(),
                    }],
                    extra: Default::default(),
                }
            })
            .collect();
        articles.push(SquadArticle {
            title: Some(question_id.to_string()),
            paragraphs,
            extra: Default::default(),
        });
    }
    SquadFile {
        version: Some("v2.0".to_string()),
        data: articles,
        extra: Default::default(),
    }
}

/// Canonical answer form used for deduplication and lenient matching:
/// lowercase, trimmed, inner whitespace runs collapsed to one space,
/// surrounding quotes stripped, then one trailing period stripped.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut collapsed = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for ch in lowered.trim().chars() {
        if ch.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !collapsed.is_empty() {
                collapsed.push(' ');
            }
            pending_space = false;
            collapsed.push(ch);
        }
    }
    let mut s = collapsed.as_str();
    loop {
        let stripped = s
            .strip_prefix('"')
            .and_then(|rest| rest.strip_suffix('"'))
            .or_else(|| {
                s.strip_prefix('\'')
                    .and_then(|rest| rest.strip_suffix('\''))
            });
        match stripped {
            Some(inner) if !inner.is_empty() => s = inner,
            _ => break,
        }
    }
    let s = s.strip_suffix('.').unwrap_or(s);
    s.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub text: String,
    pub probability: f64,
}

/// Up to five ranked answers for one question, probabilities non-increasing
/// and normalized texts pairwise distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswers {
    pub question_id: String,
    pub answers: Vec<RankedAnswer>,
}

pub const MAX_RANKED_ANSWERS: usize = 5;

/// Pools span predictions per question (via the pair to question index),
/// deduplicates by normalized text keeping each text's highest-probability
/// representative, orders by probability with lexicographic tie-breaks on
/// the normalized text, and truncates to five. Output is ordered by
/// question id; questions whose pairs produced no predictions are absent.
pub fn aggregate(
    predictions: &BTreeMap<String, Vec<SpanPrediction>>,
    pair_to_question: &BTreeMap<String, String>,
) -> Result<Vec<RankedAnswers>> {
    let mut pooled: BTreeMap<&str, Vec<&SpanPrediction>> = BTreeMap::new();
    for (pair_id, candidates) in predictions {
        let question_id = pair_to_question.get(pair_id).ok_or_else(|| {
            Error::validation(format!("predictions reference unknown pair id {pair_id}"))
        })?;
        pooled.entry(question_id).or_default().extend(candidates);
    }

    let mut out = Vec::with_capacity(pooled.len());
    for (question_id, candidates) in pooled {
        let mut best: HashMap<String, RankedAnswer> = HashMap::new();
        for candidate in candidates {
            if !candidate.probability.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite probability for pair {}",
                    candidate.pair_id
                )));
            }
            let norm = normalize_answer(&candidate.text);
            if norm.is_empty() {
                continue;
            }
            match best.get_mut(&norm) {
                Some(existing) if existing.probability >= candidate.probability => {}
                _ => {
                    best.insert(
                        norm,
                        RankedAnswer {
                            text: candidate.text.clone(),
                            probability: candidate.probability,
                        },
                    );
                }
            }
        }
        let mut ranked: Vec<(String, RankedAnswer)> = best.into_iter().collect();
        ranked.sort_by(|(norm_a, a), (norm_b, b)| {
            b.probability
                .partial_cmp(&a.probability)
                .expect("probabilities checked finite")
                .then_with(|| norm_a.cmp(norm_b))
        });
        ranked.truncate(MAX_RANKED_ANSWERS);
        out.push(RankedAnswers {
            question_id: question_id.to_string(),
            answers: ranked.into_iter().map(|(_, a)| a).collect(),
        });
    }
    Ok(out)
}

/// Builds a submission by echoing the template questions and replacing each
/// factoid question's `exact_answer` with its ranked answers, one synonym
/// group of one entry per answer (empty list when nothing was predicted).
/// Non-factoid questions pass through untouched.
pub fn emit_submission(
    answers: &[RankedAnswers],
    template: &[BioasqQuestion],
) -> Result<Vec<BioasqQuestion>> {
    let by_question: HashMap<&str, &RankedAnswers> = answers
        .iter()
        .map(|a| (a.question_id.as_str(), a))
        .collect();
    let mut out = Vec::with_capacity(template.len());
    for question in template {
        let mut question = question.clone();
        if question.question_type == QuestionType::Factoid {
            let groups = match by_question.get(question.id.as_str()) {
                Some(ranked) => ranked
                    .answers
                    .iter()
                    .map(|a| vec![a.text.clone()])
                    .collect(),
                None => Vec::new(),
            };
            question.exact_answer = Some(SynonymGroups(groups));
        }
        out.push(question);
    }
    Ok(out)
}
