//! BioASQ- and SQuAD-style corpus models, loaders, and writers.
//!
//! Unknown fields are preserved in `extra` bags so that loading a corpus and
//! writing it back round-trips every field we do not interpret. All answer
//! offsets count Unicode code points.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::textutil::char_slice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Factoid,
    List,
    Yesno,
    Summary,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            QuestionType::Factoid => "factoid",
            QuestionType::List => "list",
            QuestionType::Yesno => "yesno",
            QuestionType::Summary => "summary",
        };
        f.write_str(name)
    }
}

/// Exact answers as synonym groups: the outer list enumerates distinct
/// answers, each inner list the accepted synonyms for that answer.
///
/// Upstream files are inconsistent about nesting, so deserialization accepts
/// a bare string (one answer, one synonym), a flat list of strings (one
/// answer whose entries are synonyms), and the canonical list of lists. A
/// mixed list containing any nested list is read as one group per element.
/// Serialization always emits the canonical nested form.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SynonymGroups(pub Vec<Vec<String>>);

impl SynonymGroups {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for SynonymGroups {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SynonymGroups {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        synonym_groups_from_value(&value).map_err(D::Error::custom)
    }
}

fn synonym_groups_from_value(value: &Value) -> std::result::Result<SynonymGroups, String> {
    match value {
        Value::String(s) => Ok(SynonymGroups(vec![vec![s.clone()]])),
        Value::Array(items) => {
            let has_nested = items.iter().any(Value::is_array);
            if has_nested {
                let mut groups = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::String(s) => groups.push(vec![s.clone()]),
                        Value::Array(inner) => {
                            let mut group = Vec::with_capacity(inner.len());
                            for syn in inner {
                                match syn {
                                    Value::String(s) => group.push(s.clone()),
                                    other => {
                                        return Err(format!(
                                            "synonym must be a string, got {other}"
                                        ))
                                    }
                                }
                            }
                            groups.push(group);
                        }
                        other => {
                            return Err(format!("answer must be a string or list, got {other}"))
                        }
                    }
                }
                Ok(SynonymGroups(groups))
            } else {
                let mut group = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::String(s) => group.push(s.clone()),
                        other => return Err(format!("synonym must be a string, got {other}")),
                    }
                }
                if group.is_empty() {
                    Ok(SynonymGroups(Vec::new()))
                } else {
                    Ok(SynonymGroups(vec![group]))
                }
            }
        }
        other => Err(format!(
            "exact_answer must be a string or list, got {other}"
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<String>,
    #[serde(
        default,
        rename = "offsetInBeginSection",
        skip_serializing_if = "Option::is_none"
    )]
    pub offset_in_begin_section: Option<i64>,
    #[serde(
        default,
        rename = "offsetInEndSection",
        skip_serializing_if = "Option::is_none"
    )]
    pub offset_in_end_section: Option<i64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioasqQuestion {
    pub id: String,
    pub body: String,
    #[serde(rename = "type")]
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snippets: Vec<Snippet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_answer: Option<SynonymGroups>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ideal_answer: Option<Value>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Reads a BioASQ-style file: a top-level object with a `questions` array.
/// Structural problems are reported with the offending question id (or index
/// when the id itself is missing); duplicate ids are rejected.
pub fn load_bioasq(path: impl AsRef<Path>) -> Result<Vec<BioasqQuestion>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let questions = root
        .get("questions")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(path, "missing top-level \"questions\" array"))?;

    let mut out = Vec::with_capacity(questions.len());
    let mut seen = HashSet::new();
    for (idx, raw) in questions.iter().enumerate() {
        let id = raw
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| {
                Error::validation(format!("question at index {idx} has no string \"id\""))
            })?;
        if id.is_empty() {
            return Err(Error::validation(format!(
                "question at index {idx} has an empty id"
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::validation(format!("duplicate question id {id:?}")));
        }
        let question: BioasqQuestion = serde_json::from_value(raw.clone())
            .map_err(|e| Error::validation(format!("question {id}: {e}")))?;
        if question.body.trim().is_empty() {
            return Err(Error::validation(format!("question {id}: empty body")));
        }
        for (s_idx, snippet) in question.snippets.iter().enumerate() {
            if snippet.text.is_empty() {
                return Err(Error::validation(format!(
                    "question {id}: snippet {s_idx} has empty text"
                )));
            }
        }
        out.push(question);
    }
    Ok(out)
}

/// Order-preserving subset of factoid questions.
pub fn filter_factoid(questions: &[BioasqQuestion]) -> Vec<BioasqQuestion> {
    questions
        .iter()
        .filter(|q| q.question_type == QuestionType::Factoid)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    /// Offset of the answer within the context, in code points.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadEntry {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<SquadAnswer>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_impossible: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadEntry>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadArticle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub paragraphs: Vec<SquadParagraph>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub data: Vec<SquadArticle>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One question/context record flattened out of the nested SQuAD layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadQA {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answers: Vec<SquadAnswer>,
    pub is_impossible: bool,
}

/// Reads the nested SQuAD layout without flattening, for lossless rewrites.
/// Structural errors carry a JSON path such as `data[2].paragraphs[0].qas[1]`.
pub fn read_squad_file(path: impl AsRef<Path>) -> Result<SquadFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    squad_file_from_value(root).map_err(|detail| Error::parse(path, detail))
}

fn squad_file_from_value(root: Value) -> std::result::Result<SquadFile, String> {
    let Value::Object(mut obj) = root else {
        return Err("top level must be an object".into());
    };
    let data = obj
        .remove("data")
        .ok_or_else(|| "missing \"data\" array".to_string())?;
    let Value::Array(raw_articles) = data else {
        return Err("\"data\" must be an array".into());
    };
    let version = match obj.remove("version") {
        None | Some(Value::Null) => None,
        Some(Value::String(v)) => Some(v),
        Some(_) => return Err("\"version\" must be a string".into()),
    };

    let mut articles = Vec::with_capacity(raw_articles.len());
    for (a_idx, raw_article) in raw_articles.into_iter().enumerate() {
        let article: SquadArticle =
            serde_json::from_value(raw_article).map_err(|e| format!("data[{a_idx}]: {e}"))?;
        for (p_idx, paragraph) in article.paragraphs.iter().enumerate() {
            for (q_idx, entry) in paragraph.qas.iter().enumerate() {
                validate_squad_entry(entry, &paragraph.context).map_err(|detail| {
                    format!("data[{a_idx}].paragraphs[{p_idx}].qas[{q_idx}]: {detail}")
                })?;
            }
        }
        articles.push(article);
    }
    Ok(SquadFile {
        version,
        data: articles,
        extra: obj,
    })
}

fn validate_squad_entry(entry: &SquadEntry, context: &str) -> std::result::Result<(), String> {
    if entry.id.is_empty() {
        return Err("empty id".into());
    }
    if entry.is_impossible && !entry.answers.is_empty() {
        return Err(format!("id {}: impossible entry carries answers", entry.id));
    }
    for answer in &entry.answers {
        let end = answer.answer_start + crate::textutil::char_len(&answer.text);
        match char_slice(context, answer.answer_start, end) {
            Some(found) if found == answer.text => {}
            _ => {
                return Err(format!(
                    "id {}: answer {:?} not found at code-point offset {}",
                    entry.id, answer.text, answer.answer_start
                ))
            }
        }
    }
    Ok(())
}

/// Loads SQuAD-style data as flat records, one per question, each carrying
/// its paragraph context. Answer offsets are validated against the context.
pub fn load_squad(path: impl AsRef<Path>) -> Result<Vec<SquadQA>> {
    let file = read_squad_file(path)?;
    Ok(flatten_squad(&file))
}

pub fn flatten_squad(file: &SquadFile) -> Vec<SquadQA> {
    let mut out = Vec::new();
    for article in &file.data {
        for paragraph in &article.paragraphs {
            for entry in &paragraph.qas {
                out.push(SquadQA {
                    id: entry.id.clone(),
                    question: entry.question.clone(),
                    context: paragraph.context.clone(),
                    answers: entry.answers.clone(),
                    is_impossible: entry.is_impossible,
                });
            }
        }
    }
    out
}

pub fn write_squad(file: &SquadFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(file)
        .map_err(|e| Error::validation(format!("serializing squad file: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes questions in the BioASQ file shape: a top-level object with a
/// `questions` array.
pub fn write_bioasq(questions: &[BioasqQuestion], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let root = serde_json::json!({ "questions": questions });
    let text = serde_json::to_string_pretty(&root)
        .map_err(|e| Error::validation(format!("serializing bioasq file: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
