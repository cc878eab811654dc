//! The router/worker transmission pipeline.
//!
//! One *trial* sends a question through r relay models ("routers"), aggregates
//! their briefs into a single report bundle, shows that bundle (and only that
//! bundle) to an answering model (the "worker"), and grades the extracted
//! option letter against the answer key. A *condition* fixes the transmission
//! regime (faithful forward vs noisy rewrite) and the router count; an *audit*
//! runs every model over the clean condition plus noisy conditions r = 1..=M.

mod ledger;
mod prompts;
mod runner;

pub use ledger::{LedgerHeader, LedgerWriter, RunLedger, LEDGER_SCHEMA};
pub use prompts::{PromptTemplates, RenderedPrompt, variation_tag};
pub use runner::{
    run_audit, run_routers, run_trial, AuditOutcome, AuditRun, FailedTrial, ModelLane,
    TrialRunner,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Label};
use crate::modelio::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("router outputs must be indexed 1..=n in order: expected index {expected}, found {found}")]
    IndexGap { expected: u32, found: u32 },
    #[error("aggregation requires at least one router output")]
    EmptyAggregation,
    #[error("condition {0:?} is invalid: {1}")]
    InvalidCondition(String, String),
    #[error("ledger {path}: {reason}")]
    LedgerFormat { path: String, reason: String },
    #[error("duplicate trial {key}")]
    DuplicateTrial { key: String },
    #[error("run directory holds config digest {found} but the supplied config digests to {expected}; refusing to mix experiments")]
    ConfigDigestMismatch { expected: String, found: String },
    #[error("prompt template {path}: {reason}")]
    Template { path: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run incomplete: {failed} of {total} trials failed; first failure: {first}")]
    Incomplete {
        failed: usize,
        total: usize,
        first: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Single router instructed to transmit the question faithfully.
    ForwardFull,
    /// r routers instructed to delete, rewrite, and perturb.
    NoisyRewrite,
}

impl ConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::ForwardFull => "forward_full",
            ConditionKind::NoisyRewrite => "noisy_rewrite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub router_count: u32,
    pub condition_seed: u64,
}

impl ConditionSpec {
    pub fn clean(condition_seed: u64) -> ConditionSpec {
        ConditionSpec {
            kind: ConditionKind::ForwardFull,
            router_count: 1,
            condition_seed,
        }
    }

    pub fn noisy(router_count: u32, condition_seed: u64) -> ConditionSpec {
        ConditionSpec {
            kind: ConditionKind::NoisyRewrite,
            router_count,
            condition_seed,
        }
    }

    /// The clean control is pinned to exactly one faithful router.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.router_count == 0 {
            return Err(PipelineError::InvalidCondition(
                self.key(),
                "router_count must be >= 1".into(),
            ));
        }
        if self.kind == ConditionKind::ForwardFull && self.router_count != 1 {
            return Err(PipelineError::InvalidCondition(
                self.key(),
                "forward_full uses exactly one router".into(),
            ));
        }
        Ok(())
    }

    /// Stable identity used in ledger keys and progress output.
    pub fn key(&self) -> String {
        format!("{}/r{}", self.kind.as_str(), self.router_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterOutput {
    /// 1-based position in the condition's router list.
    pub router_index: u32,
    pub brief: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    #[serde(default)]
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedBrief {
    pub text: String,
    pub router_count: u32,
}

/// Separator line prefix; the full separator for report j is
/// `--- Report j ---` on its own line.
pub fn report_separator(index: u32) -> String {
    format!("--- Report {index} ---")
}

/// Concatenate router briefs in router-index order, each prefixed by its
/// separator line. Nothing is deduplicated, reordered, or trimmed: the
/// worker sees exactly what the routers produced, in order.
pub fn aggregate(outputs: &[RouterOutput]) -> Result<AggregatedBrief, PipelineError> {
    if outputs.is_empty() {
        return Err(PipelineError::EmptyAggregation);
    }
    let mut text = String::new();
    for (i, out) in outputs.iter().enumerate() {
        let expected = i as u32 + 1;
        if out.router_index != expected {
            return Err(PipelineError::IndexGap {
                expected,
                found: out.router_index,
            });
        }
        text.push_str(&report_separator(expected));
        text.push('\n');
        text.push_str(&out.brief);
        text.push('\n');
    }
    Ok(AggregatedBrief {
        text,
        router_count: outputs.len() as u32,
    })
}

/// Extraction outcome stored in the ledger: a legal option letter, or the
/// literal marker `UNPARSEABLE` (graded incorrect, never dropped).
pub const UNPARSEABLE: &str = "UNPARSEABLE";

mod extracted_repr {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Label>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(label) => s.serialize_str(&label.to_string()),
            None => s.serialize_str(UNPARSEABLE),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Label>, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == UNPARSEABLE {
            return Ok(None);
        }
        Label::parse(&raw)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("bad extracted label {raw:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub question_id: String,
    pub model_id: String,
    pub condition: ConditionSpec,
    pub router_outputs: Vec<RouterOutput>,
    pub aggregated: AggregatedBrief,
    pub worker_reply: String,
    #[serde(with = "extracted_repr")]
    pub extracted: Option<Label>,
    pub correct: bool,
    pub worker_latency_ms: u64,
    #[serde(default)]
    pub worker_from_cache: bool,
}

impl TrialRecord {
    /// Resume/duplicate-detection key.
    pub fn key(&self) -> String {
        trial_key(&self.model_id, &self.condition, &self.question_id)
    }
}

pub fn trial_key(model_id: &str, condition: &ConditionSpec, question_id: &str) -> String {
    format!("{model_id}|{}|{question_id}", condition.key())
}

/// Map a raw worker reply to an option label.
///
/// Grammar, first match wins:
///  1. strip surrounding whitespace and punctuation; a lone legal letter
///     (case-insensitive) is the answer;
///  2. the first `answer is <L>` phrase (case-insensitive, punctuation
///     tolerated) whose letter is legal;
///  3. if exactly one legal label occurs anywhere as an isolated uppercase
///     token, that label.
/// Anything else is unparseable; callers grade it incorrect but keep the raw
/// reply in the record.
pub fn extract_answer(reply: &str, labels: &[Label]) -> Option<Label> {
    let legal = |c: char| -> Option<Label> {
        let candidate = Label::parse(&c.to_string())?;
        labels.contains(&candidate).then_some(candidate)
    };

    // Rule 1: the whole reply is one letter once decoration is stripped.
    let stripped =
        reply.trim_matches(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '_'));
    let mut chars = stripped.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(label) = legal(c) {
            return Some(label);
        }
    }

    // Rule 2: "answer is <L>" with a word boundary after the letter.
    static ANSWER_PHRASE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = ANSWER_PHRASE.get_or_init(|| {
        regex::Regex::new(r#"(?i)\banswer\s+is\b[\s:*\-("'\[]*([A-Za-z])(?:[^A-Za-z0-9]|$)"#)
            .expect("static regex")
    });
    for cap in re.captures_iter(reply) {
        let c = cap[1].chars().next().expect("single-char capture");
        if let Some(label) = legal(c) {
            return Some(label);
        }
    }

    // Rule 3: a unique isolated uppercase label token.
    let bytes: Vec<char> = reply.chars().collect();
    let mut found: Option<Label> = None;
    for (i, &c) in bytes.iter().enumerate() {
        if !c.is_ascii_uppercase() {
            continue;
        }
        let Some(label) = legal(c) else { continue };
        let prev_ok = i == 0 || !bytes[i - 1].is_alphanumeric();
        let next_ok = i + 1 >= bytes.len() || !bytes[i + 1].is_alphanumeric();
        if prev_ok && next_ok {
            match found {
                None => found = Some(label),
                Some(existing) if existing == label => {}
                Some(_) => return None, // two distinct candidates: ambiguous
            }
        }
    }
    found
}
