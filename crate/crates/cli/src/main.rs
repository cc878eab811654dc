//! `audit`: run transmission audits, compute violation metrics, render
//! reports, and exercise the synthetic ground-truth worlds.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 endpoint failures
//! left the run incomplete, 4 input exists but is incomplete or malformed for
//! the requested operation, 1 internal error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use benchaudit_core::config::{build_audit, AuditConfig, ConfigError};
use benchaudit_core::metrics::{
    group_gains_by_model, group_gains_by_router, ledger_gains, model_summary, router_summary,
    GainRecord, MetricsError,
};
use benchaudit_core::pipeline::{run_audit, AuditOutcome, AuditRun, PipelineError, RunLedger};
use benchaudit_core::report::{
    emit_detail_table, emit_model_table, emit_router_table, parse_detail_csv, write_reports,
    ReportError, ReportFormat,
};
use benchaudit_core::simulator::{
    estimate_cs, expected_ledger_records, h0_no_gain, h1_positive_gain, h3_reversal, run_sweep,
    sweep_csv, SimError, WorldConfig,
};

#[derive(Parser)]
#[command(
    name = "audit",
    version,
    about = "Transmission audit for multiple-choice benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute (or resume) an audit described by a TOML config.
    Run(RunArgs),
    /// Compute violation metrics from a ledger, run directory, or detail CSV.
    Metrics(MetricsArgs),
    /// Render tables and figures from a completed run directory.
    Report(ReportArgs),
    /// Run synthetic-world audits with known ground truth.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Audit config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for ledger, cache, and manifest. Default: runs/<digest12>
    /// next to the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Run directory, ledger.jsonl, or a detail CSV
    /// (model,router,clean,noisy,gain,improve,degrade).
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory to write gains.csv, model_summary.csv, router_summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing a complete ledger.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated output formats: md, csv, svg.
    #[arg(long, default_value = "md,csv,svg")]
    formats: String,
}

#[derive(Args)]
struct SimulateArgs {
    /// World definition (TOML).
    #[arg(long)]
    world: PathBuf,
    /// Comma-separated contamination strengths. With a grid starting at 0 the
    /// run also reports a sensitivity estimate. Default: the world's own
    /// strength as a single point.
    #[arg(long)]
    lambdas: Option<String>,
    /// Replications per strength.
    #[arg(long, default_value_t = 200)]
    reps: u32,
    /// Questions per replication (default: the world's question_count).
    #[arg(long)]
    questions: Option<u32>,
    /// Largest router count M; conditions run clean plus r = 1..=M.
    #[arg(long, default_value_t = 9)]
    max_routers: u32,
    /// Write the sweep as CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (audit metrics | head),
    // instead of panicking on the failed print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Report(args) => cmd_report(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("audit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: input is incomplete: {reason}")]
    Incomplete { path: String, reason: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Incomplete { .. } => 4,
            CliError::Pipeline(e) => match e {
                PipelineError::Incomplete { .. }
                | PipelineError::LedgerFormat { .. }
                | PipelineError::ConfigDigestMismatch { .. } => 4,
                PipelineError::Io { .. } => 1,
                _ => 1,
            },
            CliError::Metrics(_) | CliError::Report(_) => 4,
            CliError::Sim(e) => match e {
                SimError::Invalid(_) | SimError::EmptyCueSet | SimError::Parse { .. } => 2,
                SimError::Io { .. } => 2,
                _ => 1,
            },
            CliError::Io { .. } => 2,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// run

fn cmd_run(args: RunArgs) -> Result<ExitCode, CliError> {
    let (cfg, base) = AuditConfig::load(&args.config)?;
    let probe = build_audit(&cfg, &base, Path::new("."))?;
    let out_dir = args.out.unwrap_or_else(|| {
        let digest12: String = probe.config_digest.chars().take(12).collect();
        base.join("runs").join(digest12)
    });
    let run = build_audit(&cfg, &base, &out_dir)?;

    println!("config digest  {}", run.config_digest);
    println!(
        "plan           {} models x {} conditions x {} questions = {} trials",
        run.lanes.len(),
        run.max_routers + 1,
        run.questions.questions.len(),
        run.expected_records()
    );
    println!("run directory  {}", out_dir.display());

    let outcome = run_audit(&run)?;
    write_manifest(&run, &cfg, &outcome)?;

    println!(
        "trials         {} new, {} already present, {} failed",
        outcome.completed_now,
        outcome.skipped_existing,
        outcome.failed.len()
    );
    println!("ledger         {}", outcome.ledger_path.display());
    if outcome.is_complete() {
        println!("run complete");
        Ok(ExitCode::SUCCESS)
    } else {
        for f in outcome.failed.iter().take(5) {
            eprintln!("failed trial {}: {}", f.key, f.error);
        }
        if outcome.failed.len() > 5 {
            eprintln!("... and {} more", outcome.failed.len() - 5);
        }
        eprintln!(
            "run incomplete: {} of {} trials present; re-invoke to retry the gap",
            outcome.completed_now + outcome.skipped_existing,
            outcome.expected_records
        );
        Ok(ExitCode::from(3))
    }
}

/// Execution manifest written next to the ledger. Names of key environment
/// variables are recorded so a run is reproducible; their values never are.
fn write_manifest(
    run: &AuditRun,
    cfg: &AuditConfig,
    outcome: &AuditOutcome,
) -> Result<(), CliError> {
    let ledger = RunLedger::read(&outcome.ledger_path)?;
    let models: Vec<serde_json::Value> = cfg
        .models
        .iter()
        .map(|m| {
            serde_json::json!({
                "id": m.id,
                "endpoint": m.endpoint,
                "key_env": m.key_env,
                "router_model": AuditConfig::router_model_of(m),
                "worker_model": AuditConfig::worker_model_of(m),
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "schema": "audit-manifest/v1",
        "run_id": ledger.header.run_id,
        "config_digest": run.config_digest,
        "corpus": {
            "path": cfg.corpus.path,
            "questions_sampled": run.questions.questions.len(),
            "sample_seed": cfg.corpus.sample_seed,
            "parent_size": run.questions.parent_size,
        },
        "protocol": {
            "max_routers": run.max_routers,
            "condition_seed": run.condition_seed,
            "temperature": run.params.temperature,
            "max_tokens": run.params.max_tokens,
        },
        "models": models,
        "trials": {
            "expected": outcome.expected_records,
            "completed_now": outcome.completed_now,
            "skipped_existing": outcome.skipped_existing,
            "failed": outcome.failed.len(),
        },
        "complete": outcome.is_complete(),
    });
    let path = run.run_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    println!("manifest       {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics

fn load_gains(input: &Path) -> Result<Vec<GainRecord>, CliError> {
    let meta = std::fs::metadata(input).map_err(|e| io_err(input, e))?;
    let ledger_path = if meta.is_dir() {
        input.join("ledger.jsonl")
    } else {
        input.to_path_buf()
    };
    if ledger_path.extension().is_some_and(|e| e == "csv") {
        let text = std::fs::read_to_string(&ledger_path).map_err(|e| io_err(&ledger_path, e))?;
        return Ok(parse_detail_csv(&text)?);
    }
    if !ledger_path.exists() {
        return Err(io_err(
            &ledger_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no ledger here"),
        ));
    }
    let ledger = RunLedger::read(&ledger_path)?;
    if ledger.records.is_empty() {
        return Err(CliError::Incomplete {
            path: ledger_path.display().to_string(),
            reason: "ledger holds no trial records".into(),
        });
    }
    Ok(ledger_gains(&ledger)?)
}

fn cmd_metrics(args: MetricsArgs) -> Result<ExitCode, CliError> {
    let gains = load_gains(&args.input)?;
    let model_summaries = group_gains_by_model(&gains)
        .iter()
        .map(|(_, gs)| model_summary(gs))
        .collect::<Result<Vec<_>, _>>()?;
    let router_summaries = group_gains_by_router(&gains)
        .iter()
        .map(|(_, gs)| router_summary(gs))
        .collect::<Result<Vec<_>, _>>()?;

    let model_doc = emit_model_table(&model_summaries)?;
    let router_doc = emit_router_table(&router_summaries)?;
    println!("Per-model violation summary\n");
    println!("{}", model_doc.markdown);
    println!("Per-router-count summary\n");
    println!("{}", router_doc.markdown);

    if let Some(out) = args.out {
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let detail_doc = emit_detail_table(&gains)?;
        for (name, text) in [
            ("gains.csv", &detail_doc.csv),
            ("model_summary.csv", &model_doc.csv),
            ("router_summary.csv", &router_doc.csv),
        ] {
            let path = out.join(name);
            std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// report

fn cmd_report(args: ReportArgs) -> Result<ExitCode, CliError> {
    let formats: BTreeSet<ReportFormat> = ReportFormat::parse_list(&args.formats)?;
    let ledger_path = args.run.join("ledger.jsonl");
    let ledger = RunLedger::read(&ledger_path)?;
    let gains = ledger_gains(&ledger)?;
    let per_model = group_gains_by_model(&gains);
    let expected_questions = ledger
        .records
        .iter()
        .map(|r| r.question_id.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    let conditions = per_model
        .first()
        .map(|(_, gs)| gs.len() + 1)
        .unwrap_or_default();
    let expected = per_model.len() * conditions * expected_questions;
    if ledger.records.len() != expected {
        return Err(CliError::Incomplete {
            path: ledger_path.display().to_string(),
            reason: format!(
                "{} records, expected {} ({} models x {} conditions x {} questions); \
                 re-run the audit to fill the gap",
                ledger.records.len(),
                expected,
                per_model.len(),
                conditions,
                expected_questions
            ),
        });
    }
    let written = write_reports(&args.run, &gains, &formats)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// simulate

fn parse_lambdas(text: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: f64 = part
            .parse()
            .map_err(|_| CliError::Usage(format!("bad strength value {part:?} in --lambdas")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(CliError::Usage(format!(
                "strength values must be finite and >= 0, got {part}"
            )));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(CliError::Usage("--lambdas has no values".into()));
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage(
            "--lambdas must be strictly ascending".into(),
        ));
    }
    Ok(out)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, CliError> {
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be >= 1".into()));
    }
    let world = WorldConfig::load(&args.world)?;
    let n_questions = args.questions.unwrap_or(world.question_count);
    let lambdas = match &args.lambdas {
        Some(text) => parse_lambdas(text)?,
        None => vec![world.psi_strength],
    };

    println!(
        "world          {} (seed {}, strength {})",
        args.world.display(),
        world.world_seed,
        world.psi_strength
    );
    println!(
        "plan           strengths {:?}, {} questions, M={}, {} replications",
        lambdas, n_questions, args.max_routers, args.reps
    );

    let sweep = run_sweep(&world, &lambdas, n_questions, args.max_routers, args.reps)?;
    let csv = sweep_csv(&sweep.rows);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| io_err(path, e))?;
            println!("wrote {}", path.display());
        }
        None => {
            println!();
            print!("{csv}");
            println!();
        }
    }

    for (lambda, stats) in &sweep.per_lambda {
        if *lambda == 0.0 {
            let v = h0_no_gain(stats, 3.0);
            println!(
                "strength 0     no-gain check: {} (worst |mean|/se {:.2} at m={})",
                if v.pass { "PASS" } else { "FAIL" },
                v.worst_ratio,
                v.worst_m
            );
        } else {
            let h1 = h1_positive_gain(stats, args.max_routers, 0.01)?;
            println!(
                "strength {lambda}   gain at m={}: mean {:+.4} (se {:.4}), sign-test p {:.2e} -> {}",
                h1.m,
                h1.mean_gain,
                h1.se,
                h1.p_value,
                if h1.pass { "detected" } else { "not detected" }
            );
            if args.max_routers > 1 {
                let h3 = h3_reversal(stats)?;
                println!(
                    "strength {lambda}   transition balance: net {:+} at m={}, net {:+} at m={} -> {}",
                    h3.net_first,
                    h3.first_m,
                    h3.net_last,
                    h3.last_m,
                    if h3.pass { "reversal" } else { "no reversal" }
                );
            }
        }
    }

    if lambdas.len() >= 2 && lambdas[0] == 0.0 {
        let est = estimate_cs(&world, &lambdas, n_questions, args.reps)?;
        println!(
            "sensitivity    slope {:.4} (se {:.4}), realized clean cue overlap {:.4}",
            est.cs, est.se, est.kappa_mean
        );
    }

    println!(
        "trials         {} ledger records per strength",
        expected_ledger_records(n_questions, args.max_routers, args.reps)
    );
    Ok(ExitCode::SUCCESS)
}
