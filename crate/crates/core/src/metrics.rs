//! Accuracy, gain, and violation statistics over audit outcomes.
//!
//! Scores are exact rationals (`correct_count / n`), so gains, excesses, and
//! their means compare exactly; nothing is rounded until a report is emitted.
//! A *violation* at (model, r) means the noisy condition scored strictly above
//! the clean control: under faithful-or-lossy transmission that should not
//! happen, so positive gain is the audit's alarm signal.

use num_rational::Ratio;
use num_traits::Zero;

use crate::pipeline::{ConditionKind, ConditionSpec, RunLedger, TrialRecord};
use crate::rational::{mean, positive_part, round_to_integer, Rat};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no input records")]
    EmptyInput,
    #[error("{model_id} {condition}: missing trials for {missing:?}")]
    IncompleteCondition {
        model_id: String,
        condition: String,
        missing: Vec<String>,
    },
    #[error("duplicate trial {key}")]
    DuplicateTrial { key: String },
    #[error("records mix models {left:?} and {right:?}")]
    ModelMismatch { left: String, right: String },
    #[error("question sets differ: {reason}")]
    QuestionSetMismatch { reason: String },
    #[error("gain requires a forward_full clean score and a noisy_rewrite score, got {clean} vs {noisy}")]
    ConditionMismatch { clean: String, noisy: String },
    #[error("missing noisy condition r={0}")]
    MissingRouterSetting(u32),
    #[error("model {0:?} absent from input")]
    MissingModel(String),
    #[error("records mix router counts {left} and {right}")]
    RouterCountMismatch { left: u32, right: u32 },
    #[error("gain {gain} is inconsistent with transitions improve={improve} degrade={degrade} at n={n}")]
    TransitionIdentity {
        gain: String,
        improve: u32,
        degrade: u32,
        n: usize,
    },
    #[error("score delta must be a non-negative magnitude, got {0}")]
    NegativeDelta(f64),
    #[error("confidence decay rate must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("sensitivity grid is degenerate: {0}")]
    DegenerateGrid(String),
}

/// Accuracy of one model under one condition, exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionScore {
    pub model_id: String,
    pub condition: ConditionSpec,
    pub n: usize,
    pub correct_count: usize,
    pub accuracy: Rat,
}

/// Compute a condition score, validating that the records cover the expected
/// question ids exactly once and agree on model and condition.
pub fn accuracy(
    records: &[&TrialRecord],
    expected_ids: &[String],
) -> Result<ConditionScore, MetricsError> {
    let first = records.first().ok_or(MetricsError::EmptyInput)?;
    let model_id = first.model_id.clone();
    let condition = first.condition;
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    let mut correct_count = 0usize;
    for rec in records {
        if rec.model_id != model_id {
            return Err(MetricsError::ModelMismatch {
                left: model_id,
                right: rec.model_id.clone(),
            });
        }
        if rec.condition != condition {
            return Err(MetricsError::QuestionSetMismatch {
                reason: format!(
                    "record {} is from condition {}, expected {}",
                    rec.question_id,
                    rec.condition.key(),
                    condition.key()
                ),
            });
        }
        if !seen.insert(rec.question_id.as_str()) {
            return Err(MetricsError::DuplicateTrial {
                key: rec.key(),
            });
        }
        if !expected_ids.iter().any(|id| id == &rec.question_id) {
            return Err(MetricsError::QuestionSetMismatch {
                reason: format!("unexpected question id {:?}", rec.question_id),
            });
        }
        if rec.correct {
            correct_count += 1;
        }
    }
    let missing: Vec<String> = expected_ids
        .iter()
        .filter(|id| !seen.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::IncompleteCondition {
            model_id,
            condition: condition.key(),
            missing,
        });
    }
    let n = expected_ids.len();
    Ok(ConditionScore {
        model_id,
        condition,
        n,
        correct_count,
        accuracy: Ratio::new(correct_count as i64, n as i64),
    })
}

/// Count per-question transitions between two runs of the same question set:
/// improve = wrong under clean, correct under noisy; degrade = the reverse.
pub fn transitions(
    clean: &[&TrialRecord],
    noisy: &[&TrialRecord],
) -> Result<(u32, u32), MetricsError> {
    if clean.is_empty() || noisy.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if clean[0].model_id != noisy[0].model_id {
        return Err(MetricsError::ModelMismatch {
            left: clean[0].model_id.clone(),
            right: noisy[0].model_id.clone(),
        });
    }
    let mut clean_map = std::collections::HashMap::with_capacity(clean.len());
    for rec in clean {
        if clean_map.insert(rec.question_id.as_str(), rec.correct).is_some() {
            return Err(MetricsError::DuplicateTrial { key: rec.key() });
        }
    }
    let mut improve = 0u32;
    let mut degrade = 0u32;
    let mut matched = 0usize;
    for rec in noisy {
        let Some(&clean_correct) = clean_map.get(rec.question_id.as_str()) else {
            return Err(MetricsError::QuestionSetMismatch {
                reason: format!("noisy-only question id {:?}", rec.question_id),
            });
        };
        matched += 1;
        match (clean_correct, rec.correct) {
            (false, true) => improve += 1,
            (true, false) => degrade += 1,
            _ => {}
        }
    }
    if matched != clean_map.len() {
        return Err(MetricsError::QuestionSetMismatch {
            reason: format!(
                "clean has {} questions, noisy matched only {matched}",
                clean_map.len()
            ),
        });
    }
    Ok((improve, degrade))
}

/// Gain of one noisy condition over the clean control for one model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GainRecord {
    pub model_id: String,
    pub router_count: u32,
    pub clean_accuracy: Rat,
    pub noisy_accuracy: Rat,
    pub gain: Rat,
    /// max(gain, 0)
    pub positive_excess: Rat,
    pub improve: u32,
    pub degrade: u32,
}

impl GainRecord {
    /// Construct with consistency checks: gain must equal noisy − clean, and
    /// its sign must agree with the transition counts (strictly positive gain
    /// iff improve > degrade, and so on). The full integer identity
    /// gain·n = improve − degrade is checked wherever n is known.
    pub fn new(
        model_id: String,
        router_count: u32,
        clean_accuracy: Rat,
        noisy_accuracy: Rat,
        improve: u32,
        degrade: u32,
    ) -> Result<GainRecord, MetricsError> {
        let gain = noisy_accuracy - clean_accuracy;
        let sign_ok = match gain.cmp(&Rat::zero()) {
            std::cmp::Ordering::Greater => improve > degrade,
            std::cmp::Ordering::Less => improve < degrade,
            std::cmp::Ordering::Equal => improve == degrade,
        };
        if !sign_ok {
            return Err(MetricsError::TransitionIdentity {
                gain: gain.to_string(),
                improve,
                degrade,
                n: 0,
            });
        }
        Ok(GainRecord {
            model_id,
            router_count,
            clean_accuracy,
            noisy_accuracy,
            gain,
            positive_excess: positive_part(gain),
            improve,
            degrade,
        })
    }

    pub fn is_violation(&self) -> bool {
        self.gain > Rat::zero()
    }

    pub fn net_improve(&self) -> i64 {
        self.improve as i64 - self.degrade as i64
    }

    /// gain · n = improve − degrade, exactly (after integer rounding, which is
    /// a no-op whenever both accuracies are counts over the same n).
    pub fn integer_identity_holds(&self, n: usize) -> bool {
        round_to_integer(self.gain * Ratio::from_integer(n as i64)) == self.net_improve()
    }
}

/// Combine a clean control score and a noisy condition score into a gain
/// record, carrying the transition counts along.
pub fn gain(
    clean: &ConditionScore,
    noisy: &ConditionScore,
    transitions: (u32, u32),
) -> Result<GainRecord, MetricsError> {
    if clean.model_id != noisy.model_id {
        return Err(MetricsError::ModelMismatch {
            left: clean.model_id.clone(),
            right: noisy.model_id.clone(),
        });
    }
    if clean.condition.kind != ConditionKind::ForwardFull
        || noisy.condition.kind != ConditionKind::NoisyRewrite
    {
        return Err(MetricsError::ConditionMismatch {
            clean: clean.condition.key(),
            noisy: noisy.condition.key(),
        });
    }
    if clean.n != noisy.n {
        return Err(MetricsError::QuestionSetMismatch {
            reason: format!("clean n={} vs noisy n={}", clean.n, noisy.n),
        });
    }
    let (improve, degrade) = transitions;
    let rec = GainRecord::new(
        clean.model_id.clone(),
        noisy.condition.router_count,
        clean.accuracy,
        noisy.accuracy,
        improve,
        degrade,
    )?;
    if !rec.integer_identity_holds(clean.n) {
        return Err(MetricsError::TransitionIdentity {
            gain: rec.gain.to_string(),
            improve,
            degrade,
            n: clean.n,
        });
    }
    Ok(rec)
}

/// Per-model summary over noisy conditions r = 1..=M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSummary {
    pub model_id: String,
    pub router_settings: u32,
    pub violation_count: u32,
    pub violation_rate: Rat,
    pub max_positive_excess: Rat,
    /// Mean gain over violating settings only; zero when nothing violates.
    pub mean_positive_excess: Rat,
    pub mean_gain: Rat,
}

pub fn model_summary(gains: &[GainRecord]) -> Result<ModelSummary, MetricsError> {
    if gains.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let model_id = gains[0].model_id.clone();
    for g in gains {
        if g.model_id != model_id {
            return Err(MetricsError::ModelMismatch {
                left: model_id,
                right: g.model_id.clone(),
            });
        }
    }
    let mut sorted: Vec<&GainRecord> = gains.iter().collect();
    sorted.sort_by_key(|g| g.router_count);
    for (i, g) in sorted.iter().enumerate() {
        let expected = i as u32 + 1;
        if g.router_count != expected {
            if g.router_count == expected.saturating_sub(1) {
                return Err(MetricsError::DuplicateTrial {
                    key: format!("{model_id} r={}", g.router_count),
                });
            }
            return Err(MetricsError::MissingRouterSetting(expected));
        }
    }
    let m = sorted.len() as u32;
    let violating: Vec<Rat> = sorted
        .iter()
        .filter(|g| g.is_violation())
        .map(|g| g.gain)
        .collect();
    let all: Vec<Rat> = sorted.iter().map(|g| g.gain).collect();
    Ok(ModelSummary {
        model_id,
        router_settings: m,
        violation_count: violating.len() as u32,
        violation_rate: Ratio::new(violating.len() as i64, m as i64),
        max_positive_excess: sorted
            .iter()
            .map(|g| g.positive_excess)
            .max()
            .unwrap_or_else(Rat::zero),
        mean_positive_excess: mean(&violating).unwrap_or_else(Rat::zero),
        mean_gain: mean(&all).expect("non-empty"),
    })
}

/// Per-router-count summary across models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterSummary {
    pub router_count: u32,
    pub model_count: u32,
    pub violating_models: u32,
    pub violation_rate: Rat,
    /// Mean gain over violating models only; zero when nothing violates.
    pub mean_positive_excess: Rat,
    pub improve_total: i64,
    pub degrade_total: i64,
    pub net_improve: i64,
}

pub fn router_summary(gains: &[GainRecord]) -> Result<RouterSummary, MetricsError> {
    if gains.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let router_count = gains[0].router_count;
    let mut seen_models = std::collections::HashSet::new();
    for g in gains {
        if g.router_count != router_count {
            return Err(MetricsError::RouterCountMismatch {
                left: router_count,
                right: g.router_count,
            });
        }
        if !seen_models.insert(g.model_id.as_str()) {
            return Err(MetricsError::DuplicateTrial {
                key: format!("{} r={router_count}", g.model_id),
            });
        }
    }
    let violating: Vec<Rat> = gains
        .iter()
        .filter(|g| g.is_violation())
        .map(|g| g.gain)
        .collect();
    Ok(RouterSummary {
        router_count,
        model_count: gains.len() as u32,
        violating_models: violating.len() as u32,
        violation_rate: Ratio::new(violating.len() as i64, gains.len() as i64),
        mean_positive_excess: mean(&violating).unwrap_or_else(Rat::zero),
        improve_total: gains.iter().map(|g| g.improve as i64).sum(),
        degrade_total: gains.iter().map(|g| g.degrade as i64).sum(),
        net_improve: gains.iter().map(|g| g.net_improve()).sum(),
    })
}

/// Group gain records by model in first-appearance order.
pub fn group_gains_by_model(gains: &[GainRecord]) -> Vec<(String, Vec<GainRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: std::collections::HashMap<String, Vec<GainRecord>> =
        std::collections::HashMap::new();
    for g in gains {
        if !buckets.contains_key(&g.model_id) {
            order.push(g.model_id.clone());
        }
        buckets.entry(g.model_id.clone()).or_default().push(g.clone());
    }
    order
        .into_iter()
        .map(|m| {
            let bucket = buckets.remove(&m).expect("bucket exists");
            (m, bucket)
        })
        .collect()
}

/// Group gain records by router count, ascending.
pub fn group_gains_by_router(gains: &[GainRecord]) -> Vec<(u32, Vec<GainRecord>)> {
    let mut buckets: std::collections::BTreeMap<u32, Vec<GainRecord>> =
        std::collections::BTreeMap::new();
    for g in gains {
        buckets.entry(g.router_count).or_default().push(g.clone());
    }
    buckets.into_iter().collect()
}

/// Derive all gain records from a complete run ledger: for every model, the
/// clean control plus noisy conditions r = 1..=M, where M is the largest
/// router count present for that model.
pub fn ledger_gains(ledger: &RunLedger) -> Result<Vec<GainRecord>, MetricsError> {
    let mut model_order: Vec<&str> = Vec::new();
    for rec in &ledger.records {
        if !model_order.contains(&rec.model_id.as_str()) {
            model_order.push(&rec.model_id);
        }
    }
    if model_order.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut out = Vec::new();
    for model in model_order {
        let clean: Vec<&TrialRecord> = ledger
            .records
            .iter()
            .filter(|r| r.model_id == model && r.condition.kind == ConditionKind::ForwardFull)
            .collect();
        if clean.is_empty() {
            return Err(MetricsError::MissingModel(format!(
                "{model} has no forward_full control records"
            )));
        }
        let expected_ids: Vec<String> = clean.iter().map(|r| r.question_id.clone()).collect();
        let clean_score = accuracy(&clean, &expected_ids)?;
        let m_max = ledger
            .records
            .iter()
            .filter(|r| r.model_id == model && r.condition.kind == ConditionKind::NoisyRewrite)
            .map(|r| r.condition.router_count)
            .max()
            .ok_or(MetricsError::MissingRouterSetting(1))?;
        for r in 1..=m_max {
            let noisy: Vec<&TrialRecord> = ledger
                .records
                .iter()
                .filter(|rec| {
                    rec.model_id == model
                        && rec.condition.kind == ConditionKind::NoisyRewrite
                        && rec.condition.router_count == r
                })
                .collect();
            if noisy.is_empty() {
                return Err(MetricsError::MissingRouterSetting(r));
            }
            let noisy_score = accuracy(&noisy, &expected_ids)?;
            let trans = transitions(&clean, &noisy)?;
            out.push(gain(&clean_score, &noisy_score, trans)?);
        }
    }
    Ok(out)
}

/// Confidence discount for a benchmark score given a contamination-gap
/// magnitude: exp(−β·|Δ|). Strictly decreasing in |Δ|, equal to 1 at Δ = 0.
pub fn score_confidence(delta_abs: f64, beta: f64) -> Result<f64, MetricsError> {
    if !delta_abs.is_finite() || delta_abs < 0.0 {
        return Err(MetricsError::NegativeDelta(delta_abs));
    }
    if !beta.is_finite() || beta <= 0.0 {
        return Err(MetricsError::InvalidBeta(beta));
    }
    Ok((-beta * delta_abs).exp())
}

/// Contamination sensitivity: the forward difference of mean accuracy at the
/// low end of a contamination-strength grid, (m(l1) - m(0)) / l1. The grid
/// must contain strength 0 and at least one positive strength; only the two
/// smallest grid points enter the estimate.
pub fn contamination_sensitivity(curve: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if curve.len() < 2 {
        return Err(MetricsError::DegenerateGrid(format!(
            "need at least two (lambda, accuracy) points, got {}",
            curve.len()
        )));
    }
    let mut sorted: Vec<(f64, f64)> = curve.to_vec();
    for &(l, a) in &sorted {
        if !l.is_finite() || !a.is_finite() {
            return Err(MetricsError::DegenerateGrid(format!(
                "non-finite point ({l}, {a})"
            )));
        }
        if l < 0.0 {
            return Err(MetricsError::DegenerateGrid(format!(
                "negative contamination strength {l}"
            )));
        }
    }
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite checked"));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(MetricsError::DegenerateGrid(
            "duplicate lambda grid points".into(),
        ));
    }
    let (l0, m0) = sorted[0];
    let (l1, m1) = sorted[1];
    if l0 != 0.0 {
        return Err(MetricsError::DegenerateGrid(format!(
            "grid must include lambda = 0, smallest point is {l0}"
        )));
    }
    Ok((m1 - m0) / l1)
}
