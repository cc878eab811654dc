//! Release gate for the audit harness. Each criterion prints exactly one
//! `PASS criterion-N: ...` or `FAIL criterion-N: ...` line (run with
//! `--nocapture` to see them all).
//!
//! Criterion 1 is expected to print FAIL: the published per-model summary
//! disagrees with the published detail grid it was summarized from, in
//! exactly two cells of the Qwen3.5-35B row (see docs/fixtures.md and the
//! metrics_fixture tests in the core crate). The test asserts that the
//! divergence is exactly that known set and nothing else, so the criterion
//! stays honestly red without masking real regressions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use benchaudit_core::corpus::{sample_questions, Label, Question, QuestionSet};
use benchaudit_core::metrics::{group_gains_by_model, group_gains_by_router, model_summary, router_summary};
use benchaudit_core::pipeline::RunLedger;
use benchaudit_core::report::{emit_model_table, emit_router_table, parse_detail_csv, parse_model_csv};
use benchaudit_core::simulator::{
    estimate_cs, h0_no_gain, h1_positive_gain, h3_reversal, replication_stats, run_synthetic_audit,
    MStat, WorldConfig,
};
use sha2::{Digest, Sha256};

const SENTINEL: &str = "hidden-stem-marker-55c1";

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn fixture(name: &str) -> String {
    let path = repo_path("fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn audit_bin() -> &'static str {
    env!("CARGO_BIN_EXE_audit")
}

#[test]
fn criterion_1_published_model_table() {
    let gains = parse_detail_csv(&fixture("table2.csv")).unwrap();
    let summaries: Vec<_> = group_gains_by_model(&gains)
        .iter()
        .map(|(_, gs)| model_summary(gs).unwrap())
        .collect();
    let computed = parse_model_csv(&emit_model_table(&summaries).unwrap().csv).unwrap();
    let published = parse_model_csv(&fixture("golden/table1_published.csv")).unwrap();
    assert_eq!(computed.len(), published.len());

    let mut mismatched: Vec<String> = Vec::new();
    for (got, want) in computed.iter().zip(&published) {
        assert_eq!(got.model_id, want.model_id, "row order must match published order");
        let cells = [
            ("violations", got.violations == want.violations),
            ("settings", got.settings == want.settings),
            ("violation_rate", got.violation_rate == want.violation_rate),
            ("max_positive_excess", got.max_positive_excess == want.max_positive_excess),
            ("mean_positive_excess", got.mean_positive_excess == want.mean_positive_excess),
            ("mean_gain", got.mean_gain == want.mean_gain),
        ];
        for (name, ok) in cells {
            if !ok {
                mismatched.push(format!("{}.{}", got.model_id, name));
            }
        }
    }
    if mismatched.is_empty() {
        println!("PASS criterion-1: per-model summary matches the published table cell-for-cell");
    } else {
        println!(
            "FAIL criterion-1: per-model summary diverges from the published table in {} cell(s): {} \
             (the published row is inconsistent with the published detail grid; recomputed values 0.180/0.041 \
             vs published 0.178/0.040, see docs/fixtures.md)",
            mismatched.len(),
            mismatched.join(", ")
        );
    }
    // The divergence must be exactly the two documented cells. Anything else
    // appearing here is a real regression and fails the suite.
    assert_eq!(
        mismatched,
        vec![
            "Qwen3.5-35B.mean_positive_excess".to_string(),
            "Qwen3.5-35B.mean_gain".to_string(),
        ],
        "divergence from the published model table must be exactly the two documented cells"
    );
}

#[test]
fn criterion_2_integer_identity() {
    let gains = parse_detail_csv(&fixture("table2.csv")).unwrap();
    assert_eq!(gains.len(), 108);
    for g in &gains {
        assert!(
            g.integer_identity_holds(100),
            "round(gain*100) != improve - degrade for {} r={}",
            g.model_id,
            g.router_count
        );
        assert_eq!(
            g.is_violation(),
            g.improve > g.degrade,
            "violation flag must agree with transition counts for {} r={}",
            g.model_id,
            g.router_count
        );
    }
    println!(
        "PASS criterion-2: round(gain*n) == improve - degrade holds on all {} detail rows at n=100",
        gains.len()
    );
}

#[test]
fn criterion_3_published_router_table() {
    let gains = parse_detail_csv(&fixture("table2.csv")).unwrap();
    let grouped = group_gains_by_router(&gains);
    assert_eq!(grouped.len(), 9);

    let expected_transitions: [(u32, u32); 9] = [
        (112, 150),
        (120, 145),
        (138, 154),
        (121, 158),
        (137, 135),
        (118, 139),
        (120, 144),
        (150, 110),
        (180, 116),
    ];
    let expected_violations: [u32; 9] = [5, 4, 6, 7, 7, 7, 8, 10, 8];

    for (i, (r, gs)) in grouped.iter().enumerate() {
        assert_eq!(*r, (i + 1) as u32);
        assert_eq!(gs.len(), 12, "each router count covers all 12 models");
        let improve: u32 = gs.iter().map(|g| g.improve).sum();
        let degrade: u32 = gs.iter().map(|g| g.degrade).sum();
        let violating = gs.iter().filter(|g| g.is_violation()).count() as u32;
        assert_eq!(
            (improve, degrade),
            expected_transitions[i],
            "transition totals at r={r}"
        );
        assert_eq!(violating, expected_violations[i], "violating models at r={r}");
    }

    let summaries: Vec<_> = grouped.iter().map(|(_, gs)| router_summary(gs).unwrap()).collect();
    let computed = emit_router_table(&summaries).unwrap();
    assert_eq!(
        computed.csv,
        fixture("golden/table3_published.csv"),
        "per-router summary must reproduce the published table byte-for-byte"
    );
    println!(
        "PASS criterion-3: per-router summary reproduces the published table byte-for-byte, \
         including all nine improve/degrade totals and violation counts"
    );
}

#[test]
fn criterion_4_end_to_end_scripted_audit() {
    let started = Instant::now();
    let config = repo_path("configs/smoke.toml");
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    let run = |config: &Path, out: &Path| {
        Command::new(audit_bin())
            .args(["run", "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .output()
            .expect("spawn audit binary")
    };

    // Fresh run completes the full grid.
    let first = run(&config, &out_a);
    let first_stdout = String::from_utf8_lossy(&first.stdout).to_string();
    assert!(
        first.status.success(),
        "fresh run must exit 0\nstdout:\n{first_stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert!(first_stdout.contains("run complete"));
    let ledger_a = RunLedger::read(&out_a.join("ledger.jsonl")).unwrap();
    assert_eq!(ledger_a.records.len(), 80, "2 models x 4 conditions x 10 questions");
    assert!(out_a.join("manifest.json").exists());

    // Re-invoking on the same directory adds nothing and still exits 0.
    let again = run(&config, &out_a);
    assert!(again.status.success());
    let again_stdout = String::from_utf8_lossy(&again.stdout);
    assert!(
        again_stdout.contains("0 new, 80 already present"),
        "rerun must skip the whole grid, got:\n{again_stdout}"
    );

    // A second fresh run is bit-identical in content.
    let second = run(&config, &out_b);
    assert!(second.status.success());
    let ledger_b = RunLedger::read(&out_b.join("ledger.jsonl")).unwrap();
    assert_eq!(ledger_a.content_digest(), ledger_b.content_digest());

    // Question text stays on the router side of the protocol: the worker
    // sees only aggregated router briefs, so the stem marker placed in every
    // corpus question must never show up in aggregated text or replies.
    for rec in &ledger_a.records {
        assert!(
            !rec.aggregated.text.contains(SENTINEL),
            "stem text leaked into an aggregated brief at {}",
            rec.key()
        );
        assert!(!rec.worker_reply.contains(SENTINEL));
        for out in &rec.router_outputs {
            assert!(!out.brief.contains(SENTINEL));
        }
    }

    // An endpoint that dies mid-run leaves a resumable partial ledger and a
    // nonzero exit; healing the endpoint and re-invoking completes the gap.
    let corpus_abs = repo_path("fixtures/smoke_corpus.csv");
    let book_path = dir.path().join("book.json");
    let mut book: serde_json::Value =
        serde_json::from_str(&fixture("scripts/relay_echo.json")).unwrap();
    book["fail_after"] = serde_json::json!({ "after_calls": 30, "times": 1000000 });
    std::fs::write(&book_path, serde_json::to_string_pretty(&book).unwrap()).unwrap();
    let flaky_config = dir.path().join("flaky.toml");
    std::fs::write(
        &flaky_config,
        format!(
            r#"[corpus]
path = "{}"
sample_n = 10
sample_seed = 42

[protocol]
max_routers = 3
condition_seed = 42
concurrency = 2

[[models]]
id = "relay-echo"
endpoint = "scripted:book.json"
"#,
            corpus_abs.display()
        ),
    )
    .unwrap();

    let out_c = dir.path().join("c");
    let broken = run(&flaky_config, &out_c);
    assert_eq!(
        broken.status.code(),
        Some(3),
        "mid-run endpoint failure must exit 3\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&broken.stdout),
        String::from_utf8_lossy(&broken.stderr)
    );
    let partial = RunLedger::read(&out_c.join("ledger.jsonl")).unwrap();
    assert!(
        !partial.records.is_empty() && partial.records.len() < 40,
        "expected a partial ledger, got {} records",
        partial.records.len()
    );

    book.as_object_mut().unwrap().remove("fail_after");
    std::fs::write(&book_path, serde_json::to_string_pretty(&book).unwrap()).unwrap();
    let healed = run(&flaky_config, &out_c);
    assert!(
        healed.status.success(),
        "resume after healing must exit 0\nstderr:\n{}",
        String::from_utf8_lossy(&healed.stderr)
    );
    let resumed = RunLedger::read(&out_c.join("ledger.jsonl")).unwrap();
    resumed.require_complete(40).unwrap();

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 10,
        "scripted end-to-end flow took {elapsed:?}, budget is 10s"
    );
    println!(
        "PASS criterion-4: scripted audit runs complete, deterministic, resumable after \
         endpoint failure, and keep question text out of worker-side records ({elapsed:?})"
    );
}

fn load_world(name: &str) -> WorldConfig {
    WorldConfig::load(&repo_path("worlds").join(name)).unwrap()
}

#[test]
fn criterion_5_null_world_no_gain() {
    let started = Instant::now();
    let world = load_world("h0_no_contamination.toml");
    let audit = run_synthetic_audit(&world, 50, 9, 200).unwrap();
    let stats = replication_stats(&audit).unwrap();
    let verdict = h0_no_gain(&stats, 3.0);
    let elapsed = started.elapsed();

    for rep in &audit.reps {
        assert_eq!(
            rep.delta,
            benchaudit_core::rational::Rat::from_integer(0),
            "zero-strength world must have exactly zero effect"
        );
    }
    assert!(
        verdict.pass,
        "null world shows systematic gain: |mean|/se = {:.2} at m={}",
        verdict.worst_ratio, verdict.worst_m
    );
    assert!(elapsed.as_secs() < 60, "200 replications took {elapsed:?}, budget is 60s");
    println!(
        "PASS criterion-5: zero-strength world shows no gain at any router count \
         (worst |mean|/se = {:.2} at m={}, 200 replications in {elapsed:?})",
        verdict.worst_ratio, verdict.worst_m
    );
}

fn contaminated_stats() -> &'static Vec<MStat> {
    static STATS: OnceLock<Vec<MStat>> = OnceLock::new();
    STATS.get_or_init(|| {
        let world = load_world("h1_contaminated.toml");
        let audit = run_synthetic_audit(&world, 50, 9, 200).unwrap();
        replication_stats(&audit).unwrap()
    })
}

#[test]
fn criterion_6_contaminated_world_detected() {
    let stats = contaminated_stats();
    let verdict = h1_positive_gain(stats, 9, 0.01).unwrap();
    assert!(
        verdict.pass,
        "contaminated world not detected at m=9: mean={:.4} se={:.4} p={:.3e}",
        verdict.mean_gain, verdict.se, verdict.p_value
    );
    println!(
        "PASS criterion-6: contaminated world detected at m=9 \
         (mean gain {:.4}, se {:.4}, sign-test p = {:.2e} < 0.01)",
        verdict.mean_gain, verdict.se, verdict.p_value
    );
}

#[test]
fn criterion_7_transition_reversal() {
    let stats = contaminated_stats();
    let verdict = h3_reversal(stats).unwrap();
    assert!(
        verdict.pass,
        "no net-transition reversal: net {} at m={}, net {} at m={}",
        verdict.net_first, verdict.first_m, verdict.net_last, verdict.last_m
    );
    println!(
        "PASS criterion-7: net transitions flip sign across router counts \
         (net {} at m={}, net {} at m={})",
        verdict.net_first, verdict.first_m, verdict.net_last, verdict.last_m
    );
}

#[test]
fn criterion_8_sensitivity_slope() {
    let world = load_world("cs_linear.toml");
    let est = estimate_cs(&world, &[0.0, 0.5], 50, 120).unwrap();
    assert!(
        (est.kappa_mean - 0.3).abs() < 1e-12,
        "linear world has exact clean overlap 0.3, got {}",
        est.kappa_mean
    );
    assert!(est.se > 0.0);
    assert!(
        (est.cs - est.kappa_mean).abs() <= 3.0 * est.se,
        "estimated slope {} not within 3 se ({}) of analytic value {}",
        est.cs,
        est.se,
        est.kappa_mean
    );
    println!(
        "PASS criterion-8: estimated sensitivity slope {:.4} (se {:.4}) matches the \
         analytic value {:.4} within 3 standard errors",
        est.cs, est.se, est.kappa_mean
    );
}

fn synthetic_500() -> QuestionSet {
    let questions: Vec<Question> = (0..500)
        .map(|i| Question {
            id: format!("q{i:03}"),
            stem: format!("placeholder stem {i}"),
            options: vec!["w".into(), "x".into(), "y".into(), "z".into()],
            answer_key: Label::from_index(i % 4).unwrap(),
            meta: BTreeMap::new(),
        })
        .collect();
    QuestionSet {
        name: "synthetic-500".to_string(),
        questions,
        sample_seed: None,
        parent_size: None,
    }
}

fn sampled_indices_in_process() -> Vec<usize> {
    let set = synthetic_500();
    let sample = sample_questions(&set, 100, 42).unwrap();
    sample
        .questions
        .iter()
        .map(|q| q.id[1..].parse::<usize>().unwrap())
        .collect()
}

fn indices_digest(indices: &[usize]) -> String {
    let joined = indices
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",");
    hex::encode(Sha256::digest(joined.as_bytes()))
}

/// Helper for criterion 9, not a criterion itself: when re-invoked as a
/// child process it prints the sampled index sequence between markers. In a
/// normal test run the env guard makes it a no-op.
#[test]
fn sampler_child_emit() {
    if std::env::var("ACCEPTANCE_SAMPLER_CHILD").is_err() {
        return;
    }
    let indices = sampled_indices_in_process();
    let joined = indices
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",");
    println!("SAMPLE-BEGIN {joined} SAMPLE-END");
}

#[test]
fn criterion_9_sampling_reproducibility() {
    let indices = sampled_indices_in_process();
    assert_eq!(indices.len(), 100);
    assert!(indices.windows(2).all(|w| w[0] < w[1]), "sampled ids stay in corpus order");
    assert_eq!(&indices[..12], &[1, 2, 4, 9, 13, 17, 18, 21, 23, 33, 35, 42]);
    assert_eq!(&indices[96..], &[487, 491, 496, 497]);
    let digest = indices_digest(&indices);
    assert_eq!(
        digest,
        "8a49029d8891f93531b9096e2f3d498c5fb93715c45348a541ddb8df50d1a1db",
        "seed-42 sample of 100 from 500 drifted from the pinned golden sequence"
    );

    // Same draw from a separate process: guards against anything
    // process-local (ASLR-dependent hashing, global state) sneaking into
    // the sampler.
    let child = Command::new(std::env::current_exe().unwrap())
        .args(["sampler_child_emit", "--exact", "--nocapture"])
        .env("ACCEPTANCE_SAMPLER_CHILD", "1")
        .output()
        .expect("spawn child sampler");
    assert!(child.status.success());
    let stdout = String::from_utf8_lossy(&child.stdout);
    // The marker shares its line with libtest's own "test ... " prefix, so
    // locate it by substring rather than line start.
    let begin = stdout
        .find("SAMPLE-BEGIN ")
        .unwrap_or_else(|| panic!("no sample marker in child output:\n{stdout}"));
    let end = stdout
        .find(" SAMPLE-END")
        .expect("malformed sample marker line");
    let joined = &stdout[begin + "SAMPLE-BEGIN ".len()..end];
    let child_indices: Vec<usize> = joined.split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(child_indices, indices, "child process drew a different sample");

    println!(
        "PASS criterion-9: seed-42 sample (100 of 500) matches the pinned golden digest \
         {} in-process and from a separate process",
        &digest[..12]
    );
}
