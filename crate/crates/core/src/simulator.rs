//! Fully observable synthetic worlds for exercising the audit mechanism.
//!
//! Questions are bundles of abstract atoms instead of text, so every latent
//! quantity the live audit can only infer is directly measurable here: the
//! task-relevant set S(q), the irrelevant pool N(q), the contamination-cue
//! set Ξ(q), the coverage and cue overlap of any brief, and the exact success
//! probability behind every worker draw. Routers delete and inject atoms, the
//! worker is a success-probability rule
//!
//!   p = clamp(base(coverage, noise fraction) + psi_strength · kappa, 0, 1)
//!
//! and all randomness is counter-keyed by (world_seed, replication, question,
//! condition, router), never by psi_strength. Two runs differing only in
//! psi_strength therefore share every draw, which is what makes the
//! contamination-free score exactly computable rather than estimated.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Question};
use crate::detrng::DetRng;
use crate::metrics::{
    contamination_sensitivity, group_gains_by_router, ledger_gains, MetricsError,
};
use crate::pipeline::{
    aggregate, ConditionSpec, LedgerHeader, PipelineError, RouterOutput, RunLedger, TrialRecord,
};
use crate::rational::Rat;
use num_rational::Ratio;
use num_traits::Zero;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("cue set is empty")]
    EmptyCueSet,
    #[error("cannot read world file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse world file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Base success probability: a logistic ramp in (coverage − penalty·noise),
/// scaled into [floor, ceil]. Weakly increasing in coverage and weakly
/// decreasing in noise fraction whenever slope ≥ 0 and noise_penalty ≥ 0,
/// which validation enforces. slope = 0 gives a flat baseline, the regime
/// where clean and noisy conditions are exactly exchangeable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSuccess {
    pub floor: f64,
    pub ceil: f64,
    pub slope: f64,
    pub midpoint: f64,
    pub noise_penalty: f64,
}

impl Default for BaseSuccess {
    fn default() -> Self {
        BaseSuccess {
            floor: 0.35,
            ceil: 0.35,
            slope: 0.0,
            midpoint: 0.5,
            noise_penalty: 0.3,
        }
    }
}

impl BaseSuccess {
    pub fn validate(&self) -> Result<(), SimError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.floor) || !in_unit(self.ceil) || self.floor > self.ceil {
            return Err(SimError::Invalid(format!(
                "base floor/ceil must satisfy 0 <= floor <= ceil <= 1, got {} / {}",
                self.floor, self.ceil
            )));
        }
        for (name, v) in [("slope", self.slope), ("noise_penalty", self.noise_penalty)] {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::Invalid(format!(
                    "base {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.midpoint.is_finite() {
            return Err(SimError::Invalid("base midpoint must be finite".into()));
        }
        Ok(())
    }

    /// π⁰(coverage, noise_frac).
    pub fn probability(&self, coverage: f64, noise_frac: f64) -> f64 {
        let x = self.slope * (coverage - self.noise_penalty * noise_frac - self.midpoint);
        let sig = 1.0 / (1.0 + (-x).exp());
        self.floor + (self.ceil - self.floor) * sig
    }
}

fn default_question_count() -> u32 {
    50
}
fn default_exo_pool() -> u32 {
    8
}

/// Declarative description of one synthetic world. Every count is per
/// question; atoms are drawn without replacement from a shared universe, so
/// S, N, the unreachable cues, and the exogenous pool are pairwise disjoint
/// by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub atom_universe_size: u32,
    #[serde(default = "default_question_count")]
    pub question_count: u32,
    /// |S(q)|: task-relevant atoms.
    pub info_atoms: u32,
    /// |N(q)|: irrelevant atoms eligible for noise injection.
    pub irrelevant_atoms: u32,
    /// Cues placed inside S(q): present in a faithful relay, deleted like any
    /// info atom in noisy relays.
    #[serde(default)]
    pub cues_in_info: u32,
    /// Cues placed inside N(q): absent from a faithful relay, reachable only
    /// through injected noise.
    #[serde(default)]
    pub cues_in_noise: u32,
    /// Cues no brief can ever carry; they exist so that kappa has a
    /// denominator even in worlds where contamination cannot manifest.
    #[serde(default)]
    pub cues_unreachable: u32,
    /// Exogenous perturbation atoms mixed into the noise-injection pool.
    #[serde(default = "default_exo_pool")]
    pub exo_pool: u32,
    /// d: per-atom independent drop probability per noisy router.
    pub deletion_rate: f64,
    /// ν: expected injected atoms per noisy router, Poisson-distributed.
    pub noise_rate: f64,
    /// Contamination response strength: the per-trial success bump is
    /// strength times the realized cue overlap.
    pub psi_strength: f64,
    #[serde(default)]
    pub base: BaseSuccess,
    pub world_seed: u64,
}

impl WorldConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<WorldConfig, SimError> {
        let world: WorldConfig = toml::from_str(text).map_err(|e| SimError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<WorldConfig, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        WorldConfig::from_toml(&text, &path.display().to_string())
    }

    pub fn cue_count(&self) -> u32 {
        self.cues_in_info + self.cues_in_noise + self.cues_unreachable
    }

    fn atoms_per_question(&self) -> u32 {
        self.info_atoms + self.irrelevant_atoms + self.cues_unreachable + self.exo_pool
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.question_count < 1 {
            return Err(SimError::Invalid("question_count must be >= 1".into()));
        }
        if self.info_atoms < 1 {
            return Err(SimError::Invalid("info_atoms must be >= 1".into()));
        }
        if self.cues_in_info > self.info_atoms {
            return Err(SimError::Invalid(format!(
                "cues_in_info ({}) cannot exceed info_atoms ({})",
                self.cues_in_info, self.info_atoms
            )));
        }
        if self.cues_in_noise > self.irrelevant_atoms {
            return Err(SimError::Invalid(format!(
                "cues_in_noise ({}) cannot exceed irrelevant_atoms ({})",
                self.cues_in_noise, self.irrelevant_atoms
            )));
        }
        if self.cue_count() < 1 {
            return Err(SimError::EmptyCueSet);
        }
        if self.atoms_per_question() > self.atom_universe_size {
            return Err(SimError::Invalid(format!(
                "universe of {} atoms cannot host {} atoms per question",
                self.atom_universe_size,
                self.atoms_per_question()
            )));
        }
        if !(0.0..1.0).contains(&self.deletion_rate) {
            return Err(SimError::Invalid(format!(
                "deletion_rate must be in [0, 1), got {}",
                self.deletion_rate
            )));
        }
        if !self.noise_rate.is_finite() || self.noise_rate < 0.0 {
            return Err(SimError::Invalid(format!(
                "noise_rate must be finite and >= 0, got {}",
                self.noise_rate
            )));
        }
        if !self.psi_strength.is_finite() || self.psi_strength < 0.0 {
            return Err(SimError::Invalid(format!(
                "psi_strength must be finite and >= 0, got {}",
                self.psi_strength
            )));
        }
        self.base.validate()
    }

    /// Stable identity string; hashed into the synthetic ledger's config
    /// digest so ledgers from different worlds never pass for each other.
    fn canonical(&self) -> String {
        format!(
            "simworld/v1|universe={}|questions={}|info={}|irrelevant={}|cues={}/{}/{}|exo={}|d={:?}|nu={:?}|lambda={:?}|base={:?}/{:?}/{:?}/{:?}/{:?}|seed={}",
            self.atom_universe_size,
            self.question_count,
            self.info_atoms,
            self.irrelevant_atoms,
            self.cues_in_info,
            self.cues_in_noise,
            self.cues_unreachable,
            self.exo_pool,
            self.deletion_rate,
            self.noise_rate,
            self.psi_strength,
            self.base.floor,
            self.base.ceil,
            self.base.slope,
            self.base.midpoint,
            self.base.noise_penalty,
            self.world_seed
        )
    }
}

type Atom = u32;

/// Ground truth behind one synthetic question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latent {
    /// Task-relevant atoms S(q).
    pub info: BTreeSet<Atom>,
    /// Irrelevant atoms N(q), disjoint from S(q).
    pub irrelevant: BTreeSet<Atom>,
    /// Contamination cues Ξ(q).
    pub cues: BTreeSet<Atom>,
    /// Injection pool for noisy routers: N(q) plus exogenous atoms. Ordered,
    /// because injections index into it.
    pub noise_pool: Vec<Atom>,
    pub answer_key: Label,
}

const KEY_QUESTION: u64 = 0x73_69_6d_2d_71_75_65_73; // "sim-ques"
const KEY_ROUTER: u64 = 0x73_69_6d_2d_72_6f_75_74; // "sim-rout"
const KEY_WORKER: u64 = 0x73_69_6d_2d_77_6f_72_6b; // "sim-work"
const KEY_TRIAL: u64 = 0x73_69_6d_2d_74_72_69_61; // "sim-tria"

fn atom_token(a: Atom) -> String {
    format!("a{a:05}")
}

fn brief_text(atoms: &[Atom]) -> String {
    let toks: Vec<String> = atoms.iter().map(|&a| atom_token(a)).collect();
    toks.join(" ")
}

/// Deterministically construct question `index` of the world: latent sets,
/// an answer key, and a presentable 4-option question shell. Disjointness of
/// S, N, the unreachable cues, and the exogenous pool holds by construction
/// (one sample without replacement, then a partition).
pub fn synth_question(world: &WorldConfig, index: u32) -> Result<(Question, Latent), SimError> {
    if index >= world.question_count {
        return Err(SimError::Invalid(format!(
            "question index {index} out of range (world has {})",
            world.question_count
        )));
    }
    let mut rng = DetRng::from_key(&[KEY_QUESTION, world.world_seed, index as u64]);
    let need = world.atoms_per_question() as usize;
    let mut seen = BTreeSet::new();
    let mut drawn: Vec<Atom> = Vec::with_capacity(need);
    while drawn.len() < need {
        let a = rng.below(world.atom_universe_size as u64) as Atom;
        if seen.insert(a) {
            drawn.push(a);
        }
    }
    let take = |slice: &[Atom]| -> BTreeSet<Atom> { slice.iter().copied().collect() };
    let ni = world.info_atoms as usize;
    let nn = world.irrelevant_atoms as usize;
    let nu = world.cues_unreachable as usize;
    let info = take(&drawn[..ni]);
    let irrelevant = take(&drawn[ni..ni + nn]);
    let unreachable = &drawn[ni + nn..ni + nn + nu];
    let exo = &drawn[ni + nn + nu..];

    // cue partition: the first cues_in_info atoms of S, the first
    // cues_in_noise atoms of N (in draw order), and the unreachable block
    let mut cues = BTreeSet::new();
    cues.extend(&drawn[..world.cues_in_info as usize]);
    cues.extend(&drawn[ni..ni + world.cues_in_noise as usize]);
    cues.extend(unreachable);

    let mut noise_pool: Vec<Atom> = drawn[ni..ni + nn].to_vec();
    noise_pool.extend_from_slice(exo);

    let answer_key = Label::from_index(rng.below(4) as usize).expect("4 < 26");
    let question = Question {
        id: format!("sq-{index:04}"),
        stem: "Recover the keyed label from the transmitted atom bundle.".to_string(),
        options: ["north", "east", "south", "west"]
            .iter()
            .map(|d| format!("bundle keyed {d}"))
            .collect(),
        answer_key,
        meta: Default::default(),
    };
    Ok((
        question,
        Latent {
            info,
            irrelevant,
            cues,
            noise_pool,
            answer_key,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterMode {
    Clean,
    Noisy,
}

/// Produce one router's brief as an atom multiset. Clean mode transmits S
/// exactly. Noisy mode keeps each S atom with probability 1−d, then injects
/// Poisson(ν) draws (with replacement) from the noise pool. Deterministic in
/// (trial_seed, router_index); psi_strength plays no part.
pub fn synth_router(
    latent: &Latent,
    world: &WorldConfig,
    mode: RouterMode,
    router_index: u32,
    trial_seed: u64,
) -> Vec<Atom> {
    match mode {
        RouterMode::Clean => latent.info.iter().copied().collect(),
        RouterMode::Noisy => {
            let mut rng = DetRng::from_key(&[KEY_ROUTER, trial_seed, router_index as u64]);
            let mut brief: Vec<Atom> = Vec::with_capacity(latent.info.len());
            for &a in &latent.info {
                if rng.chance(1.0 - world.deletion_rate) {
                    brief.push(a);
                }
            }
            let injections = rng.poisson(world.noise_rate);
            for _ in 0..injections {
                let pick = latent.noise_pool[rng.below(latent.noise_pool.len() as u64) as usize];
                brief.push(pick);
            }
            brief
        }
    }
}

/// Fraction of the cue set present among the aggregated briefing atoms.
pub fn overlap_kappa(aggregated: &BTreeSet<Atom>, cues: &BTreeSet<Atom>) -> Result<f64, SimError> {
    if cues.is_empty() {
        return Err(SimError::EmptyCueSet);
    }
    let hit = aggregated.intersection(cues).count();
    Ok(hit as f64 / cues.len() as f64)
}

/// Everything observable about one worker invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerDraw {
    pub label: Label,
    pub success: bool,
    /// Realized success probability, base + psi, after clamping.
    pub p: f64,
    /// The base component alone: what p would be with psi_strength = 0.
    pub p_base: f64,
    pub coverage: f64,
    pub noise_frac: f64,
    pub kappa: f64,
    /// The uniform variate behind the success draw; exposed so property tests
    /// can verify common-random-numbers behavior directly.
    pub u: f64,
}

/// Execute the success-probability rule on an aggregated brief. The uniform
/// variate and the wrong-option pick are both drawn unconditionally, so the
/// draw stream is identical across psi_strength values: re-running a trial
/// with a different strength reuses the same u and flips only the trials
/// whose u lies between the two probabilities.
pub fn synth_worker(
    aggregated: &BTreeSet<Atom>,
    latent: &Latent,
    world: &WorldConfig,
    trial_seed: u64,
) -> Result<WorkerDraw, SimError> {
    let mut rng = DetRng::from_key(&[KEY_WORKER, trial_seed]);
    let u = rng.next_f64();
    let wrong_slot = rng.below(3) as usize;

    let coverage = aggregated.intersection(&latent.info).count() as f64 / latent.info.len() as f64;
    let noise_frac = if aggregated.is_empty() {
        0.0
    } else {
        let foreign = aggregated.len() - aggregated.intersection(&latent.info).count();
        foreign as f64 / aggregated.len() as f64
    };
    let kappa = overlap_kappa(aggregated, &latent.cues)?;
    let p_base = world.base.probability(coverage, noise_frac);
    let p = (p_base + world.psi_strength * kappa).clamp(0.0, 1.0);
    let success = u < p;
    let label = if success {
        latent.answer_key
    } else {
        let wrong: Vec<Label> = (0..4)
            .filter_map(Label::from_index)
            .filter(|l| *l != latent.answer_key)
            .collect();
        wrong[wrong_slot]
    };
    Ok(WorkerDraw {
        label,
        success,
        p,
        p_base,
        coverage,
        noise_frac,
        kappa,
        u,
    })
}

/// Exact per-replication scores, computable only because the world is
/// synthetic: s_b is the clean-control score at the configured psi_strength,
/// s_0 the score of the identical run with the strength forced to zero on
/// the same draws, delta their difference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepExact {
    pub s_b: Rat,
    pub s_0: Rat,
    pub delta: Rat,
}

#[derive(Debug, Clone)]
pub struct SyntheticAudit {
    pub ledger: RunLedger,
    pub reps: Vec<RepExact>,
    /// Mean realized cue overlap of clean-condition briefs, one entry per
    /// replication.
    pub clean_kappa_means: Vec<f64>,
}

impl SyntheticAudit {
    pub fn mean_delta(&self) -> Rat {
        let sum: Rat = self.reps.iter().map(|r| r.delta).sum();
        sum / Ratio::from_integer(self.reps.len() as i64)
    }

    pub fn mean_clean_kappa(&self) -> f64 {
        self.clean_kappa_means.iter().sum::<f64>() / self.clean_kappa_means.len() as f64
    }
}

fn trial_seed_for(world_seed: u64, replication: u32, question: u32, condition_code: u64) -> u64 {
    DetRng::from_key(&[
        KEY_TRIAL,
        world_seed,
        replication as u64,
        question as u64,
        condition_code,
    ])
    .next_u64()
}

/// Run the full audit shape (clean control plus noisy r = 1..=M) against
/// synthetic routers and workers. Each replication appears in the ledger as
/// its own model lane (`sim-r000`, `sim-r001`, ...), so the metrics stack
/// consumes synthetic ledgers unchanged: one GainRecord per (replication, m).
///
/// Alongside the ledger, the exact contamination-free score is computed by
/// re-running every clean trial with psi_strength forced to 0 on the same
/// seeds; with psi_strength already 0 the two runs coincide draw for draw
/// and delta is exactly zero.
pub fn run_synthetic_audit(
    world: &WorldConfig,
    n_questions: u32,
    max_routers: u32,
    replications: u32,
) -> Result<SyntheticAudit, SimError> {
    world.validate()?;
    if n_questions < 1 || n_questions > world.question_count {
        return Err(SimError::Invalid(format!(
            "n_questions must be in 1..={}, got {n_questions}",
            world.question_count
        )));
    }
    if max_routers < 1 {
        return Err(SimError::Invalid("max_routers must be >= 1".into()));
    }
    if replications < 1 {
        return Err(SimError::Invalid("replications must be >= 1".into()));
    }

    let mut zero_world = world.clone();
    zero_world.psi_strength = 0.0;

    let canonical = format!(
        "{}|n={n_questions}|M={max_routers}|reps={replications}",
        world.canonical()
    );
    let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
    sha2::Digest::update(&mut hasher, canonical.as_bytes());
    let config_digest = hex::encode(sha2::Digest::finalize(hasher));
    let run_id = format!("sim-{}", &config_digest[..12]);
    let header = LedgerHeader::new(run_id, config_digest);

    let questions: Vec<(Question, Latent)> = (0..n_questions)
        .map(|i| synth_question(world, i))
        .collect::<Result<_, _>>()?;

    let mut conditions: Vec<ConditionSpec> = vec![ConditionSpec::clean(world.world_seed)];
    conditions.extend((1..=max_routers).map(|r| ConditionSpec::noisy(r, world.world_seed)));

    let mut records = Vec::with_capacity(
        replications as usize * n_questions as usize * (max_routers as usize + 1),
    );
    let mut reps = Vec::with_capacity(replications as usize);
    let mut clean_kappa_means = Vec::with_capacity(replications as usize);

    for rep in 0..replications {
        let model_id = format!("sim-r{rep:03}");
        let mut clean_hits = 0i64;
        let mut zero_hits = 0i64;
        let mut kappa_sum = 0.0f64;
        for (q_idx, (question, latent)) in questions.iter().enumerate() {
            for condition in &conditions {
                let code = match condition.kind {
                    crate::pipeline::ConditionKind::ForwardFull => 0,
                    crate::pipeline::ConditionKind::NoisyRewrite => condition.router_count as u64,
                };
                let seed = trial_seed_for(world.world_seed, rep, q_idx as u32, code);
                let mode = match condition.kind {
                    crate::pipeline::ConditionKind::ForwardFull => RouterMode::Clean,
                    crate::pipeline::ConditionKind::NoisyRewrite => RouterMode::Noisy,
                };
                let mut outputs = Vec::with_capacity(condition.router_count as usize);
                let mut agg_atoms: BTreeSet<Atom> = BTreeSet::new();
                for j in 1..=condition.router_count {
                    let atoms = synth_router(latent, world, mode, j, seed);
                    agg_atoms.extend(&atoms);
                    outputs.push(RouterOutput {
                        router_index: j,
                        brief: brief_text(&atoms),
                        latency_ms: 0,
                        usage: None,
                        from_cache: false,
                    });
                }
                let aggregated = aggregate(&outputs)?;
                let draw = synth_worker(&agg_atoms, latent, world, seed)?;
                if mode == RouterMode::Clean {
                    kappa_sum += draw.kappa;
                    if draw.success {
                        clean_hits += 1;
                    }
                    let zero_draw = synth_worker(&agg_atoms, latent, &zero_world, seed)?;
                    debug_assert_eq!(zero_draw.u, draw.u);
                    if zero_draw.success {
                        zero_hits += 1;
                    }
                }
                records.push(TrialRecord {
                    question_id: question.id.clone(),
                    model_id: model_id.clone(),
                    condition: *condition,
                    router_outputs: outputs,
                    aggregated,
                    worker_reply: draw.label.to_string(),
                    extracted: Some(draw.label),
                    correct: draw.success,
                    worker_latency_ms: 0,
                    worker_from_cache: false,
                });
            }
        }
        let n = Ratio::from_integer(n_questions as i64);
        let s_b = Ratio::from_integer(clean_hits) / n;
        let s_0 = Ratio::from_integer(zero_hits) / n;
        reps.push(RepExact {
            s_b,
            s_0,
            delta: s_b - s_0,
        });
        clean_kappa_means.push(kappa_sum / n_questions as f64);
    }

    Ok(SyntheticAudit {
        ledger: RunLedger { header, records },
        reps,
        clean_kappa_means,
    })
}

// ---------------------------------------------------------------------------
// Replication statistics and hypothesis checks

/// Per-router-count statistics over the replications of one synthetic audit.
#[derive(Debug, Clone, PartialEq)]
pub struct MStat {
    pub m: u32,
    pub mean_gain: f64,
    /// Standard error of the mean over replications (sample sd / √reps).
    pub se: f64,
    /// Replications with gain > 0 / < 0 / = 0 at this m.
    pub positive: u32,
    pub negative: u32,
    pub zero: u32,
    /// Transition totals summed over replications.
    pub improve_total: i64,
    pub degrade_total: i64,
}

impl MStat {
    pub fn net_improve(&self) -> i64 {
        self.improve_total - self.degrade_total
    }
}

fn rat_f64(r: Rat) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Reduce a synthetic audit to per-m statistics via the ordinary metrics
/// path: each replication is a model lane, so `ledger_gains` yields one gain
/// record per (replication, m).
pub fn replication_stats(audit: &SyntheticAudit) -> Result<Vec<MStat>, SimError> {
    let gains = ledger_gains(&audit.ledger)?;
    let mut out = Vec::new();
    for (m, bucket) in group_gains_by_router(&gains) {
        let xs: Vec<f64> = bucket.iter().map(|g| rat_f64(g.gain)).collect();
        let reps = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / reps;
        let var = if xs.len() < 2 {
            0.0
        } else {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1.0)
        };
        out.push(MStat {
            m,
            mean_gain: mean,
            se: (var / reps).sqrt(),
            positive: bucket.iter().filter(|g| g.gain > Rat::zero()).count() as u32,
            negative: bucket.iter().filter(|g| g.gain < Rat::zero()).count() as u32,
            zero: bucket.iter().filter(|g| g.gain == Rat::zero()).count() as u32,
            improve_total: bucket.iter().map(|g| g.improve as i64).sum(),
            degrade_total: bucket.iter().map(|g| g.degrade as i64).sum(),
        });
    }
    Ok(out)
}

/// One-sided sign test: probability of at least `positive` successes among
/// `positive + negative` fair coin flips. Ties are excluded, the standard
/// treatment. Exact summation up to 1000 informative replications, normal
/// approximation with continuity correction above that.
pub fn sign_test_p(positive: u32, negative: u32) -> f64 {
    let t = (positive + negative) as u64;
    if t == 0 {
        return 1.0;
    }
    let k = positive as u64;
    if t <= 1000 {
        let mut pmf = (t as f64) * std::f64::consts::LN_2;
        pmf = (-pmf).exp(); // 2^-t
        let mut tail = 0.0;
        let mut p = pmf;
        for i in 0..=t {
            if i >= k {
                tail += p;
            }
            if i < t {
                p *= (t - i) as f64 / (i + 1) as f64;
            }
        }
        tail.min(1.0)
    } else {
        let mean = t as f64 / 2.0;
        let sd = (t as f64 / 4.0).sqrt();
        let z = (k as f64 - 0.5 - mean) / sd;
        0.5 * erfc_approx(z / std::f64::consts::SQRT_2)
    }
}

/// Abramowitz–Stegun 7.1.26 complementary error function, |error| < 1.5e-7;
/// plenty for verdict thresholds.
fn erfc_approx(x: f64) -> f64 {
    let sign_neg = x < 0.0;
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    if sign_neg {
        1.0 + erf
    } else {
        1.0 - erf
    }
}

/// No systematic gain: at every m, |mean| within `tolerance_se` standard
/// errors of zero.
#[derive(Debug, Clone, PartialEq)]
pub struct H0Verdict {
    pub pass: bool,
    /// max over m of |mean| / se (infinite if some se is 0 with mean != 0).
    pub worst_ratio: f64,
    pub worst_m: u32,
}

pub fn h0_no_gain(stats: &[MStat], tolerance_se: f64) -> H0Verdict {
    let mut worst_ratio = 0.0;
    let mut worst_m = 0;
    for s in stats {
        let ratio = if s.mean_gain == 0.0 {
            0.0
        } else if s.se == 0.0 {
            f64::INFINITY
        } else {
            (s.mean_gain / s.se).abs()
        };
        if ratio >= worst_ratio {
            worst_ratio = ratio;
            worst_m = s.m;
        }
    }
    H0Verdict {
        pass: worst_ratio <= tolerance_se,
        worst_ratio,
        worst_m,
    }
}

/// Positive mean gain at one m, by one-sided sign test over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct H1Verdict {
    pub pass: bool,
    pub m: u32,
    pub mean_gain: f64,
    pub se: f64,
    pub p_value: f64,
}

pub fn h1_positive_gain(stats: &[MStat], m: u32, alpha: f64) -> Result<H1Verdict, SimError> {
    let s = stats
        .iter()
        .find(|s| s.m == m)
        .ok_or_else(|| SimError::Invalid(format!("no statistics at m={m}")))?;
    let p_value = sign_test_p(s.positive, s.negative);
    Ok(H1Verdict {
        pass: s.mean_gain > 0.0 && p_value < alpha,
        m,
        mean_gain: s.mean_gain,
        se: s.se,
        p_value,
    })
}

/// Directional reversal of the transition balance: net improve negative at
/// m=1, positive at the largest m.
#[derive(Debug, Clone, PartialEq)]
pub struct H3Verdict {
    pub pass: bool,
    pub net_first: i64,
    pub net_last: i64,
    pub first_m: u32,
    pub last_m: u32,
}

pub fn h3_reversal(stats: &[MStat]) -> Result<H3Verdict, SimError> {
    let first = stats
        .iter()
        .min_by_key(|s| s.m)
        .ok_or_else(|| SimError::Invalid("no statistics".into()))?;
    let last = stats.iter().max_by_key(|s| s.m).expect("non-empty");
    Ok(H3Verdict {
        pass: first.net_improve() < 0 && last.net_improve() > 0,
        net_first: first.net_improve(),
        net_last: last.net_improve(),
        first_m: first.m,
        last_m: last.m,
    })
}

// ---------------------------------------------------------------------------
// Sweeps and contamination-sensitivity estimation

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub m: u32,
    pub mean_gain: f64,
    pub se: f64,
    pub improve: i64,
    pub degrade: i64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub per_lambda: Vec<(f64, Vec<MStat>)>,
}

/// Run the audit once per contamination strength. Seeds never involve the
/// strength, so every strength sees identical router output and identical
/// worker variates: differences between rows are pure contamination response
/// plus nothing.
pub fn run_sweep(
    world: &WorldConfig,
    lambdas: &[f64],
    n_questions: u32,
    max_routers: u32,
    replications: u32,
) -> Result<SweepOutcome, SimError> {
    if lambdas.is_empty() {
        return Err(SimError::Invalid("empty lambda grid".into()));
    }
    for l in lambdas {
        if !l.is_finite() || *l < 0.0 {
            return Err(SimError::Invalid(format!("lambda must be >= 0, got {l}")));
        }
    }
    let mut rows = Vec::new();
    let mut per_lambda = Vec::new();
    for &lambda in lambdas {
        let mut w = world.clone();
        w.psi_strength = lambda;
        let audit = run_synthetic_audit(&w, n_questions, max_routers, replications)?;
        let stats = replication_stats(&audit)?;
        for s in &stats {
            rows.push(SweepRow {
                lambda,
                m: s.m,
                mean_gain: s.mean_gain,
                se: s.se,
                improve: s.improve_total,
                degrade: s.degrade_total,
            });
        }
        per_lambda.push((lambda, stats));
    }
    Ok(SweepOutcome { rows, per_lambda })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,m,mean_gain,se,improve,degrade\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{},{}\n",
            r.lambda, r.m, r.mean_gain, r.se, r.improve, r.degrade
        ));
    }
    s
}

/// Contamination-sensitivity estimate with its Monte-Carlo uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct CsEstimate {
    /// Slope of the score response at the origin of the strength grid.
    pub cs: f64,
    /// Standard error over replications of the per-replication slope.
    pub se: f64,
    /// Realized mean cue overlap of the scored (clean) briefs; for a linear
    /// response this is the analytic value of the slope.
    pub kappa_mean: f64,
    /// (strength, mean clean score) per grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Estimate the derivative of the benchmark score with respect to
/// contamination strength at 0, by finite difference on a strength grid
/// sharing all random draws. The scored quantity is the clean-control score:
/// the protocol a leaderboard would run. The grid must start at exactly 0 and
/// ascend.
pub fn estimate_cs(
    world: &WorldConfig,
    lambda_grid: &[f64],
    n_questions: u32,
    replications: u32,
) -> Result<CsEstimate, SimError> {
    if lambda_grid.len() < 2 {
        return Err(SimError::Invalid(
            "lambda grid needs at least (0, one positive value)".into(),
        ));
    }
    if lambda_grid[0] != 0.0 {
        return Err(SimError::Invalid(format!(
            "lambda grid must start at 0, got {}",
            lambda_grid[0]
        )));
    }
    if lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::Invalid("lambda grid must ascend".into()));
    }
    let mut per_rep_scores: Vec<Vec<f64>> = Vec::with_capacity(lambda_grid.len());
    let mut curve = Vec::with_capacity(lambda_grid.len());
    let mut kappa_mean = 0.0;
    for (i, &lambda) in lambda_grid.iter().enumerate() {
        let mut w = world.clone();
        w.psi_strength = lambda;
        let audit = run_synthetic_audit(&w, n_questions, 1, replications)?;
        let scores: Vec<f64> = audit.reps.iter().map(|r| rat_f64(r.s_b)).collect();
        curve.push((lambda, scores.iter().sum::<f64>() / scores.len() as f64));
        if i == 0 {
            kappa_mean = audit.mean_clean_kappa();
        }
        per_rep_scores.push(scores);
    }
    let cs = contamination_sensitivity(&curve)?;
    let l1 = lambda_grid[1];
    let slopes: Vec<f64> = per_rep_scores[0]
        .iter()
        .zip(&per_rep_scores[1])
        .map(|(s0, s1)| (s1 - s0) / l1)
        .collect();
    let reps = slopes.len() as f64;
    let mean_slope = slopes.iter().sum::<f64>() / reps;
    let var = if slopes.len() < 2 {
        0.0
    } else {
        slopes.iter().map(|x| (x - mean_slope).powi(2)).sum::<f64>() / (reps - 1.0)
    };
    Ok(CsEstimate {
        cs,
        se: (var / reps).sqrt(),
        kappa_mean,
        curve,
    })
}

/// The key shape facts of a synthetic ledger, used by tests and the CLI.
pub fn expected_ledger_records(n_questions: u32, max_routers: u32, replications: u32) -> usize {
    replications as usize * n_questions as usize * (max_routers as usize + 1)
}
