//! Factoid evaluation: strict accuracy, lenient accuracy, and mean
//! reciprocal rank over ranked five-answer submissions, plus batch-mean
//! reporting and the paired t-test re-exported for system comparison.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::convert::{normalize_answer, RankedAnswers, MAX_RANKED_ANSWERS};
use crate::corpus::{BioasqQuestion, QuestionType};
use crate::error::{Error, Result};
pub use crate::stats::{mean as mean_over_batches, paired_t_test, TTestResult};

/// Gold label for one question: synonym groups where any synonym in any
/// group is an accepted answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub question_id: String,
    pub synonym_groups: Vec<Vec<String>>,
}

impl GoldAnswer {
    pub fn validate(&self) -> Result<()> {
        if !self.synonym_groups.iter().any(|g| !g.is_empty()) {
            return Err(Error::validation(format!(
                "gold answer for question {} has no synonyms",
                self.question_id
            )));
        }
        Ok(())
    }
}

/// Rank of the first correct answer for one question, 1-based within the
/// top five; `None` when unanswered or wrong.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRank {
    pub question_id: String,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sacc: f64,
    pub lacc: f64,
    pub mrr: f64,
    pub n: usize,
    pub ranks: Vec<QuestionRank>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Compact `{sacc, lacc, mrr, n}` JSON for logs and manifests.
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "sacc": self.sacc,
            "lacc": self.lacc,
            "mrr": self.mrr,
            "n": self.n,
        })
        .to_string()
    }
}

/// True iff the candidate's normalized form equals the normalized form of
/// any synonym in any group. Candidates that normalize to nothing never
/// match.
pub fn matches(candidate: &str, gold: &GoldAnswer) -> bool {
    let candidate = normalize_answer(candidate);
    if candidate.is_empty() {
        return false;
    }
    gold.synonym_groups
        .iter()
        .flatten()
        .any(|synonym| normalize_answer(synonym) == candidate)
}

/// Scores submissions against gold. Per question the rank is the 1-based
/// position of the first matching answer within the top five; SAcc is the
/// fraction ranked 1, LAcc the fraction ranked at all, MRR the mean of
/// reciprocal ranks with unanswered questions contributing zero. Questions
/// missing from the submissions count as unanswered; answers beyond the
/// five-answer cap score zero and raise a warning.
pub fn evaluate(submissions: &[RankedAnswers], gold: &[GoldAnswer]) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::validation(
            "evaluate needs at least one gold question",
        ));
    }
    let mut gold_ids = BTreeSet::new();
    for answer in gold {
        answer.validate()?;
        if !gold_ids.insert(answer.question_id.as_str()) {
            return Err(Error::validation(format!(
                "duplicate gold question id {}",
                answer.question_id
            )));
        }
    }
    let mut by_question = std::collections::BTreeMap::new();
    for submission in submissions {
        if by_question
            .insert(submission.question_id.as_str(), submission)
            .is_some()
        {
            return Err(Error::validation(format!(
                "duplicate question id {} in submissions",
                submission.question_id
            )));
        }
    }

    let mut warnings: Vec<String> = Vec::new();
    for submission in submissions {
        if !gold_ids.contains(submission.question_id.as_str()) {
            warnings.push(format!(
                "submission for question {} has no gold answer and is ignored",
                submission.question_id
            ));
        }
        if submission.answers.len() > MAX_RANKED_ANSWERS {
            warnings.push(format!(
                "question {}: submission lists {} answers, only the top {} are scored",
                submission.question_id,
                submission.answers.len(),
                MAX_RANKED_ANSWERS
            ));
        }
    }

    let mut ranks = Vec::with_capacity(gold.len());
    let mut strict = 0usize;
    let mut lenient = 0usize;
    let mut reciprocal_sum = 0.0f64;
    for answer in gold {
        let rank = by_question.get(answer.question_id.as_str()).and_then(|s| {
            s.answers
                .iter()
                .take(MAX_RANKED_ANSWERS)
                .position(|a| matches(&a.text, answer))
                .map(|i| i + 1)
        });
        if rank == Some(1) {
            strict += 1;
        }
        if let Some(r) = rank {
            lenient += 1;
            reciprocal_sum += 1.0 / r as f64;
        }
        ranks.push(QuestionRank {
            question_id: answer.question_id.clone(),
            rank,
        });
    }

    let n = gold.len();
    Ok(EvalReport {
        sacc: strict as f64 / n as f64,
        lacc: lenient as f64 / n as f64,
        mrr: reciprocal_sum / n as f64,
        n,
        ranks,
        warnings,
    })
}

/// Extracts gold answers from annotated questions: factoid questions become
/// [`GoldAnswer`]s, other types are skipped. A factoid question without
/// exact answers cannot be scored and is an error.
pub fn gold_from_questions(questions: &[BioasqQuestion]) -> Result<Vec<GoldAnswer>> {
    let mut out = Vec::new();
    for question in questions {
        if question.question_type != QuestionType::Factoid {
            continue;
        }
        let groups = question.exact_answer.as_ref().ok_or_else(|| {
            Error::validation(format!(
                "factoid question {} has no exact_answer to score against",
                question.id
            ))
        })?;
        let gold = GoldAnswer {
            question_id: question.id.clone(),
            synonym_groups: groups.0.clone(),
        };
        gold.validate()?;
        out.push(gold);
    }
    Ok(out)
}

/// Renders an aligned text table of per-batch MRR scores: one row per
/// system, one column per batch, plus each row's mean.
pub fn format_mrr_table(systems: &[(String, Vec<f64>)], batch_labels: &[String]) -> Result<String> {
    if systems.is_empty() {
        return Err(Error::validation("the MRR table needs at least one system"));
    }
    for (name, scores) in systems {
        if scores.len() != batch_labels.len() {
            return Err(Error::validation(format!(
                "system {} has {} scores for {} batches",
                name,
                scores.len(),
                batch_labels.len()
            )));
        }
    }

    let mut header: Vec<String> = vec!["system".to_string()];
    header.extend(batch_labels.iter().cloned());
    header.push("mean".to_string());

    let mut rows: Vec<Vec<String>> = vec![header];
    for (name, scores) in systems {
        let mut row = vec![name.clone()];
        row.extend(scores.iter().map(|s| format!("{s:.4}")));
        row.push(format!("{:.4}", mean_over_batches(scores)?));
        rows.push(row);
    }

    let columns = rows[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 0 {
                out.push_str(&format!("{cell:<width$}", width = widths[c]));
            } else {
                out.push_str(&format!("{cell:>width$}", width = widths[c]));
            }
        }
        out.push('\n');
    }
    Ok(out)
}
