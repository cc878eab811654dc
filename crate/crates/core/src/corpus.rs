//! Benchmark corpus loading and deterministic subsampling.
//!
//! The harness is benchmark-agnostic: any multiple-choice set can be audited
//! as long as it arrives in one of the two documented on-disk formats (see
//! docs/formats.md and the examples under docs/samples/). Option labels are
//! implicit in option order: the first option is A, the second B, and so on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detrng::DetRng;

/// Maximum options per question: labels are single letters A..Z.
pub const MAX_OPTIONS: usize = 26;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("question {id:?}: answer key {key:?} does not name one of the {count} options")]
    InvalidAnswerKey { id: String, key: String, count: usize },
    #[error("question {id:?}: {count} options exceed the {MAX_OPTIONS}-label alphabet")]
    TooManyOptions { id: String, count: usize },
    #[error("question {id:?}: {what} is empty")]
    EmptyField { id: String, what: &'static str },
    #[error("corpus {path} contains no questions")]
    EmptyCorpus { path: String },
    #[error("cannot sample {requested} questions from a set of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("cannot infer corpus format for {path}; pass an explicit format")]
    UnknownFormat { path: String },
}

/// Single uppercase option label, A..Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(char);

impl Label {
    pub fn from_index(i: usize) -> Option<Label> {
        (i < MAX_OPTIONS).then(|| Label((b'A' + i as u8) as char))
    }

    /// Accepts one-character strings, case-insensitively.
    pub fn parse(s: &str) -> Option<Label> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => Some(Label(c.to_ascii_uppercase())),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<String> for Label {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Label::parse(&s).ok_or_else(|| format!("invalid option label {s:?}"))
    }
}

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.0.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    /// Option texts in label order: options[0] is A, options[1] is B, ...
    pub options: Vec<String>,
    pub answer_key: Label,
    /// Free-form provenance (source, split, ...); never interpreted.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Question {
    pub fn labels(&self) -> Vec<Label> {
        (0..self.options.len())
            .map(|i| Label::from_index(i).expect("option count validated at load"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub name: String,
    pub questions: Vec<Question>,
    /// Set when this set was produced by `sample_questions`.
    pub sample_seed: Option<u64>,
    /// Size of the set the sample was drawn from.
    pub parent_size: Option<usize>,
}

impl QuestionSet {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.questions.iter().map(|q| q.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Decide from the file extension: .csv, or .jsonl/.ndjson for lines.
    #[default]
    Auto,
    /// Header `id,stem,options,answer_key`; options are `||`-separated.
    Csv,
    /// One flat JSON object per line with the same fields as the csv columns.
    Lines,
}

/// Load a corpus file. Question order in the file is preserved; every question
/// is validated (non-empty stem and options, ≤26 options, answer key within
/// the option alphabet) and ids must be unique.
pub fn load_benchmark(path: &Path, format: CorpusFormat) -> Result<QuestionSet, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let format = resolve_format(path, format, &text)?;
    let questions = match format {
        CorpusFormat::Csv => parse_csv(&text)?,
        CorpusFormat::Lines => parse_lines(&text)?,
        CorpusFormat::Auto => unreachable!("resolved above"),
    };
    if questions.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.display().to_string(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for q in &questions {
        if !seen.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateId(q.id.clone()));
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Ok(QuestionSet {
        name,
        questions,
        sample_seed: None,
        parent_size: None,
    })
}

fn resolve_format(path: &Path, format: CorpusFormat, text: &str) -> Result<CorpusFormat, CorpusError> {
    if format != CorpusFormat::Auto {
        return Ok(format);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(CorpusFormat::Csv),
        Some("jsonl") | Some("ndjson") => Ok(CorpusFormat::Lines),
        _ => {
            // Sniff: a JSON-lines file starts with an object.
            let first = text.trim_start().chars().next();
            match first {
                Some('{') => Ok(CorpusFormat::Lines),
                Some(_) => Ok(CorpusFormat::Csv),
                None => Err(CorpusError::UnknownFormat {
                    path: path.display().to_string(),
                }),
            }
        }
    }
}

const OPTION_SEPARATOR: &str = "||";

fn build_question(
    line: u64,
    id: String,
    stem: String,
    options_joined: &str,
    answer_key: &str,
    meta: BTreeMap<String, String>,
) -> Result<Question, CorpusError> {
    if id.is_empty() {
        return Err(CorpusError::MalformedRow {
            line,
            reason: "empty id".into(),
        });
    }
    if stem.trim().is_empty() {
        return Err(CorpusError::EmptyField { id, what: "stem" });
    }
    let options: Vec<String> = options_joined
        .split(OPTION_SEPARATOR)
        .map(|s| s.to_string())
        .collect();
    if options.len() < 2 {
        return Err(CorpusError::MalformedRow {
            line,
            reason: format!("question {id:?} has {} option(s); need at least 2", options.len()),
        });
    }
    if options.len() > MAX_OPTIONS {
        return Err(CorpusError::TooManyOptions {
            id,
            count: options.len(),
        });
    }
    if options.iter().any(|o| o.trim().is_empty()) {
        return Err(CorpusError::EmptyField { id, what: "option" });
    }
    let key = Label::parse(answer_key).ok_or_else(|| CorpusError::InvalidAnswerKey {
        id: id.clone(),
        key: answer_key.to_string(),
        count: options.len(),
    })?;
    if key.index() >= options.len() {
        return Err(CorpusError::InvalidAnswerKey {
            id,
            key: answer_key.to_string(),
            count: options.len(),
        });
    }
    Ok(Question {
        id,
        stem,
        options,
        answer_key: key,
        meta,
    })
}

fn parse_csv(text: &str) -> Result<Vec<Question>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    for required in ["id", "stem", "options", "answer_key"] {
        if !headers.iter().any(|h| h == required) {
            return Err(CorpusError::MalformedRow {
                line: 1,
                reason: format!("missing required column {required:?}"),
            });
        }
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::MalformedRow {
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for (h, v) in headers.iter().zip(record.iter()) {
            fields.insert(h, v);
        }
        let meta: BTreeMap<String, String> = fields
            .iter()
            .filter(|(k, _)| !matches!(**k, "id" | "stem" | "options" | "answer_key"))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        out.push(build_question(
            line,
            fields["id"].to_string(),
            fields["stem"].to_string(),
            fields["options"],
            fields["answer_key"],
            meta,
        )?);
    }
    Ok(out)
}

fn parse_lines(text: &str) -> Result<Vec<Question>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let obj: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(raw).map_err(|e| CorpusError::MalformedRow {
                line,
                reason: e.to_string(),
            })?;
        let get = |key: &str| -> Result<String, CorpusError> {
            match obj.get(key) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(other) => Err(CorpusError::MalformedRow {
                    line,
                    reason: format!("field {key:?} must be a string, got {other}"),
                }),
                None => Err(CorpusError::MalformedRow {
                    line,
                    reason: format!("missing field {key:?}"),
                }),
            }
        };
        let id = get("id")?;
        let stem = get("stem")?;
        let options = get("options")?;
        let answer_key = get("answer_key")?;
        let mut meta = BTreeMap::new();
        for (k, v) in &obj {
            if matches!(k.as_str(), "id" | "stem" | "options" | "answer_key") {
                continue;
            }
            match v {
                serde_json::Value::String(s) => {
                    meta.insert(k.clone(), s.clone());
                }
                other => {
                    return Err(CorpusError::MalformedRow {
                        line,
                        reason: format!("meta field {k:?} must be a string, got {other}"),
                    })
                }
            }
        }
        out.push(build_question(line, id, stem, &options, &answer_key, meta)?);
    }
    Ok(out)
}

/// Draw a deterministic n-question subsample.
///
/// The selection depends only on (question ids in order, n, seed): a splitmix64
/// stream seeded with `seed` drives a partial Fisher–Yates shuffle over the
/// index vector 0..len, the first n indices are taken, then re-sorted so the
/// sampled questions keep their original relative order. Plain 64-bit integer
/// arithmetic end to end, so the same inputs select the same ids on every
/// platform.
pub fn sample_questions(
    set: &QuestionSet,
    n: usize,
    seed: u64,
) -> Result<QuestionSet, CorpusError> {
    let len = set.questions.len();
    if n > len {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: len,
        });
    }
    let picked = sample_indices(len, n, seed);
    let questions: Vec<Question> = picked
        .iter()
        .map(|&i| set.questions[i].clone())
        .collect();
    Ok(QuestionSet {
        name: format!("{}[n={n},seed={seed}]", set.name),
        questions,
        sample_seed: Some(seed),
        parent_size: Some(len),
    })
}

/// Index-level core of `sample_questions`, exposed for golden tests.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = DetRng::new(seed);
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.below((len - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut picked: Vec<usize> = indices[..n].to_vec();
    picked.sort_unstable();
    picked
}
