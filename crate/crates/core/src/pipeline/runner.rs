//! Trial execution and whole-audit orchestration.
//!
//! A trial is the atomic unit: all of its router calls and the worker call
//! must succeed before anything is written, so the ledger never holds a
//! partial trial. Failed trials are collected and reported; a later
//! invocation with the same config re-runs exactly the missing keys.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{
    aggregate, extract_answer, trial_key, ConditionSpec, LedgerHeader, LedgerWriter,
    PipelineError, PromptTemplates, RouterOutput, TrialRecord,
};
#[cfg(test)]
use super::RunLedger;
use crate::corpus::{Label, Question, QuestionSet};
use crate::modelio::{cached_chat, ChatRequest, ChatTransport, GenParams, PurposeTag, ResponseCache};

/// Everything needed to execute trials for one audited model.
pub struct TrialRunner<'a> {
    pub templates: &'a PromptTemplates,
    pub router: &'a dyn ChatTransport,
    pub worker: &'a dyn ChatTransport,
    /// Identity recorded in the ledger.
    pub model_id: &'a str,
    /// Endpoint model names; usually both equal `model_id`, since the router
    /// and the worker are instantiated with the same model by default.
    pub router_model: &'a str,
    pub worker_model: &'a str,
    pub params: GenParams,
    pub cache: Option<&'a ResponseCache>,
}

/// Issue the condition's router calls and return their briefs ordered by
/// router index.
pub fn run_routers(
    runner: &TrialRunner<'_>,
    q: &Question,
    condition: ConditionSpec,
) -> Result<Vec<RouterOutput>, PipelineError> {
    condition.validate()?;
    let mut outputs = Vec::with_capacity(condition.router_count as usize);
    for index in 1..=condition.router_count {
        let prompt = runner.templates.router_prompt(q, condition, index)?;
        let req = ChatRequest {
            model_id: runner.router_model.to_string(),
            messages: prompt.into_messages(),
            params: runner.params,
            purpose: PurposeTag::Router,
        };
        let (reply, from_cache) = cached_chat(runner.router, runner.cache, &req)?;
        outputs.push(RouterOutput {
            router_index: index,
            brief: reply.content,
            latency_ms: reply.latency_ms,
            usage: reply.usage,
            from_cache,
        });
    }
    Ok(outputs)
}

/// Run one question through routers, aggregation, and the worker, and grade
/// the extracted letter. The worker prompt is built from the aggregated brief
/// and the label alphabet only.
pub fn run_trial(
    runner: &TrialRunner<'_>,
    q: &Question,
    condition: ConditionSpec,
) -> Result<TrialRecord, PipelineError> {
    let router_outputs = run_routers(runner, q, condition)?;
    let aggregated = aggregate(&router_outputs)?;
    let labels: Vec<Label> = (0..q.options.len())
        .map(|i| Label::from_index(i).expect("validated option count"))
        .collect();
    let prompt = runner.templates.worker_prompt(&aggregated, &labels)?;
    let req = ChatRequest {
        model_id: runner.worker_model.to_string(),
        messages: prompt.into_messages(),
        params: runner.params,
        purpose: PurposeTag::Worker,
    };
    let (reply, worker_from_cache) = cached_chat(runner.worker, runner.cache, &req)?;
    let extracted = extract_answer(&reply.content, &labels);
    let correct = extracted == Some(q.answer_key);
    Ok(TrialRecord {
        question_id: q.id.clone(),
        model_id: runner.model_id.to_string(),
        condition,
        router_outputs,
        aggregated,
        worker_reply: reply.content,
        extracted,
        correct,
        worker_latency_ms: reply.latency_ms,
        worker_from_cache,
    })
}

impl TrialRunner<'_> {
    pub fn run_routers(
        &self,
        q: &Question,
        condition: ConditionSpec,
    ) -> Result<Vec<RouterOutput>, PipelineError> {
        run_routers(self, q, condition)
    }

    pub fn run_trial(
        &self,
        q: &Question,
        condition: ConditionSpec,
    ) -> Result<TrialRecord, PipelineError> {
        run_trial(self, q, condition)
    }
}

/// One audited model with its resolved transports.
#[derive(Clone)]
pub struct ModelLane {
    pub model_id: String,
    pub router_model: String,
    pub worker_model: String,
    pub router: Arc<dyn ChatTransport>,
    pub worker: Arc<dyn ChatTransport>,
}

impl std::fmt::Debug for ModelLane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelLane")
            .field("model_id", &self.model_id)
            .field("router_model", &self.router_model)
            .field("worker_model", &self.worker_model)
            .field("router", &self.router.name())
            .field("worker", &self.worker.name())
            .finish()
    }
}

impl ModelLane {
    /// The common case: one transport, one model name, both roles.
    pub fn uniform(model_id: &str, transport: Arc<dyn ChatTransport>) -> ModelLane {
        ModelLane {
            model_id: model_id.to_string(),
            router_model: model_id.to_string(),
            worker_model: model_id.to_string(),
            router: Arc::clone(&transport),
            worker: transport,
        }
    }
}

/// A fully resolved execution plan: sampled questions, model lanes, condition
/// grid, templates, and the run directory.
#[derive(Debug)]
pub struct AuditRun {
    /// Generated from the config digest and start time when absent.
    pub run_id: Option<String>,
    pub config_digest: String,
    pub questions: QuestionSet,
    pub lanes: Vec<ModelLane>,
    /// M: noisy conditions run r = 1..=max_routers.
    pub max_routers: u32,
    pub condition_seed: u64,
    pub templates: PromptTemplates,
    pub params: GenParams,
    pub concurrency: usize,
    pub run_dir: PathBuf,
    pub cache_replies: bool,
}

impl AuditRun {
    pub fn conditions(&self) -> Vec<ConditionSpec> {
        let mut conds = vec![ConditionSpec::clean(self.condition_seed)];
        conds.extend((1..=self.max_routers).map(|r| ConditionSpec::noisy(r, self.condition_seed)));
        conds
    }

    /// |models| × (M+1) × n
    pub fn expected_records(&self) -> usize {
        self.lanes.len() * (self.max_routers as usize + 1) * self.questions.questions.len()
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.run_dir.join("ledger.jsonl")
    }
}

#[derive(Debug, Clone)]
pub struct FailedTrial {
    pub key: String,
    pub error: String,
}

/// What an invocation did: how many trials were newly run, how many were
/// already present, and which ones failed. A run with failures leaves the
/// ledger valid; re-invoking retries exactly the failed keys.
#[derive(Debug)]
pub struct AuditOutcome {
    pub ledger_path: PathBuf,
    pub expected_records: usize,
    pub completed_now: usize,
    pub skipped_existing: usize,
    pub failed: Vec<FailedTrial>,
}

impl AuditOutcome {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
            && self.completed_now + self.skipped_existing == self.expected_records
    }
}

type WorkItem = (usize, ConditionSpec, usize);

/// Run (or resume) a full audit: every lane × condition × question not yet in
/// the ledger. Trials run concurrently up to `concurrency`; appends are
/// serialized; a trial either lands complete or not at all.
pub fn run_audit(run: &AuditRun) -> Result<AuditOutcome, PipelineError> {
    std::fs::create_dir_all(&run.run_dir).map_err(|e| PipelineError::Io {
        path: run.run_dir.display().to_string(),
        source: e,
    })?;
    let ledger_path = run.ledger_path();
    let (writer, existing_keys) = if ledger_path.exists() {
        let (writer, existing) = LedgerWriter::open_resume(&ledger_path, &run.config_digest)?;
        log::info!(
            "resuming run {} with {} records already present",
            existing.header.run_id,
            existing.records.len()
        );
        (writer, existing.keys())
    } else {
        let run_id = run.run_id.clone().unwrap_or_else(|| {
            let prefix: String = run.config_digest.chars().take(12).collect();
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("run-{prefix}-{now}")
        });
        let header = LedgerHeader::new(run_id, run.config_digest.clone());
        (LedgerWriter::open_new(&ledger_path, &header)?, Default::default())
    };

    let cache = if run.cache_replies {
        let dir = run.run_dir.join("cache");
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        Some(ResponseCache::new(dir))
    } else {
        None
    };

    let mut items: VecDeque<WorkItem> = VecDeque::new();
    let mut skipped_existing = 0usize;
    for (lane_idx, lane) in run.lanes.iter().enumerate() {
        for cond in run.conditions() {
            cond.validate()?;
            for (q_idx, q) in run.questions.questions.iter().enumerate() {
                if existing_keys.contains(&trial_key(&lane.model_id, &cond, &q.id)) {
                    skipped_existing += 1;
                } else {
                    items.push_back((lane_idx, cond, q_idx));
                }
            }
        }
    }
    let total_new = items.len();
    log::info!(
        "audit: {} trials to run ({} already in ledger, {} expected total)",
        total_new,
        skipped_existing,
        run.expected_records()
    );

    let queue = Mutex::new(items);
    let failures: Mutex<Vec<FailedTrial>> = Mutex::new(Vec::new());
    let done = AtomicUsize::new(0);
    let threads = run.concurrency.clamp(1, total_new.max(1));

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let item = queue.lock().expect("queue lock").pop_front();
                let Some((lane_idx, cond, q_idx)) = item else {
                    break;
                };
                let lane = &run.lanes[lane_idx];
                let q = &run.questions.questions[q_idx];
                let runner = TrialRunner {
                    templates: &run.templates,
                    router: lane.router.as_ref(),
                    worker: lane.worker.as_ref(),
                    model_id: &lane.model_id,
                    router_model: &lane.router_model,
                    worker_model: &lane.worker_model,
                    params: run.params,
                    cache: cache.as_ref(),
                };
                let key = trial_key(&lane.model_id, &cond, &q.id);
                match runner.run_trial(q, cond) {
                    Ok(rec) => match writer.append(&rec) {
                        Ok(()) => {
                            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                            if n % 50 == 0 || n == total_new {
                                log::info!("{n}/{total_new} trials complete");
                            }
                        }
                        Err(e) => failures
                            .lock()
                            .expect("failures lock")
                            .push(FailedTrial {
                                key,
                                error: e.to_string(),
                            }),
                    },
                    Err(e) => failures.lock().expect("failures lock").push(FailedTrial {
                        key,
                        error: e.to_string(),
                    }),
                }
            });
        }
    });

    let mut failed = failures.into_inner().expect("failures lock");
    failed.sort_by(|a, b| a.key.cmp(&b.key));
    for f in &failed {
        log::warn!("trial {} failed: {}", f.key, f.error);
    }
    Ok(AuditOutcome {
        ledger_path,
        expected_records: run.expected_records(),
        completed_now: done.into_inner(),
        skipped_existing,
        failed,
    })
}
