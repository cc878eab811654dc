//! Append-only trial ledger: one JSON header line, then one trial per line.
//!
//! The ledger is the unit of resumability. Appends are serialized through one
//! writer and flushed per record, so a completed trial survives the process;
//! a trial that failed mid-flight simply never appears and is re-run on
//! resume. The comparison digest covers record content but not timing or
//! cache provenance, so a resumed run and an uninterrupted run compare equal.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{PipelineError, TrialRecord, UNPARSEABLE};

pub const LEDGER_SCHEMA: &str = "audit-ledger/v1";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LedgerHeader {
    pub schema: String,
    pub run_id: String,
    pub config_digest: String,
    pub created_unix: u64,
}

impl LedgerHeader {
    pub fn new(run_id: String, config_digest: String) -> LedgerHeader {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        LedgerHeader {
            schema: LEDGER_SCHEMA.to_string(),
            run_id,
            config_digest,
            created_unix,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunLedger {
    pub header: LedgerHeader,
    pub records: Vec<TrialRecord>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> PipelineError {
    PipelineError::LedgerFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunLedger {
    pub fn read(path: &Path) -> Result<RunLedger, PipelineError> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut header: Option<LedgerHeader> = None;
        let mut records = Vec::new();
        let mut keys = HashSet::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                let h: LedgerHeader = serde_json::from_str(&line)
                    .map_err(|e| format_err(path, format!("line {}: bad header: {e}", lineno + 1)))?;
                if h.schema != LEDGER_SCHEMA {
                    return Err(format_err(
                        path,
                        format!("schema {:?}, this build reads {LEDGER_SCHEMA:?}", h.schema),
                    ));
                }
                header = Some(h);
                continue;
            }
            let rec: TrialRecord = serde_json::from_str(&line)
                .map_err(|e| format_err(path, format!("line {}: {e}", lineno + 1)))?;
            validate_record(path, lineno + 1, &rec)?;
            if !keys.insert(rec.key()) {
                return Err(PipelineError::DuplicateTrial { key: rec.key() });
            }
            records.push(rec);
        }
        let header = header.ok_or_else(|| format_err(path, "empty ledger, no header line"))?;
        Ok(RunLedger { header, records })
    }

    pub fn keys(&self) -> HashSet<String> {
        self.records.iter().map(|r| r.key()).collect()
    }

    /// Error if the ledger holds anything other than exactly `expected`
    /// records. Metrics and reports refuse partial runs rather than silently
    /// computing on whatever happens to be present.
    pub fn require_complete(&self, expected: usize) -> Result<(), PipelineError> {
        if self.records.len() == expected {
            return Ok(());
        }
        Err(PipelineError::Incomplete {
            failed: expected.abs_diff(self.records.len()),
            total: expected,
            first: format!(
                "ledger holds {} of {} expected records",
                self.records.len(),
                expected
            ),
        })
    }

    /// Content digest for run comparison. Records are canonicalized and
    /// sorted by key, so append order does not matter; latency, token usage,
    /// cache provenance, run id, and timestamps are excluded, so a resumed or
    /// fully cached rerun digests identically to a fresh one.
    pub fn content_digest(&self) -> String {
        let mut lines: Vec<String> = self.records.iter().map(canonical_record).collect();
        lines.sort_unstable();
        let mut h = Sha256::new();
        h.update(b"audit-ledger-digest/v1");
        h.update([0x1d]);
        h.update(self.header.config_digest.as_bytes());
        for line in &lines {
            h.update([0x1d]);
            h.update(line.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn canonical_record(rec: &TrialRecord) -> String {
    let mut s = String::new();
    s.push_str(&rec.key());
    s.push('\u{1e}');
    s.push(if rec.correct { '1' } else { '0' });
    s.push('\u{1e}');
    match rec.extracted {
        Some(label) => s.push(label.as_char()),
        None => s.push_str(UNPARSEABLE),
    }
    s.push('\u{1e}');
    s.push_str(&rec.worker_reply);
    s.push('\u{1e}');
    s.push_str(&rec.aggregated.text);
    for out in &rec.router_outputs {
        s.push('\u{1f}');
        s.push_str(&out.brief);
    }
    s
}

fn validate_record(path: &Path, lineno: usize, rec: &TrialRecord) -> Result<(), PipelineError> {
    rec.condition.validate()?;
    if rec.router_outputs.len() != rec.condition.router_count as usize {
        return Err(format_err(
            path,
            format!(
                "line {lineno}: {} router outputs for a {} condition",
                rec.router_outputs.len(),
                rec.condition.key()
            ),
        ));
    }
    if rec.aggregated.router_count != rec.condition.router_count {
        return Err(format_err(
            path,
            format!("line {lineno}: aggregated brief router_count disagrees with condition"),
        ));
    }
    Ok(())
}

#[derive(Debug)]
struct WriterState {
    file: std::fs::File,
    keys: HashSet<String>,
}

/// Serialized append access to one ledger file. All writers in a run share
/// this through a mutex; each append is one full line plus flush.
#[derive(Debug)]
pub struct LedgerWriter {
    path: PathBuf,
    state: Mutex<WriterState>,
}

impl LedgerWriter {
    /// Start a fresh ledger. Refuses to overwrite an existing file.
    pub fn open_new(path: &Path, header: &LedgerHeader) -> Result<LedgerWriter, PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let mut line = serde_json::to_string(header).expect("header serializes");
        line.push('\n');
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| io_err(path, e))?;
        Ok(LedgerWriter {
            path: path.to_path_buf(),
            state: Mutex::new(WriterState {
                file,
                keys: HashSet::new(),
            }),
        })
    }

    /// Reopen an existing ledger for appending. The stored config digest must
    /// match the supplied one; mixing configs in one run directory is refused.
    pub fn open_resume(
        path: &Path,
        expected_config_digest: &str,
    ) -> Result<(LedgerWriter, RunLedger), PipelineError> {
        let existing = RunLedger::read(path)?;
        if existing.header.config_digest != expected_config_digest {
            return Err(PipelineError::ConfigDigestMismatch {
                expected: expected_config_digest.to_string(),
                found: existing.header.config_digest.clone(),
            });
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let writer = LedgerWriter {
            path: path.to_path_buf(),
            state: Mutex::new(WriterState {
                file,
                keys: existing.keys(),
            }),
        };
        Ok((writer, existing))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one trial. A key already present (from this run or a resumed
    /// one) is a duplicate and is refused before anything is written.
    pub fn append(&self, rec: &TrialRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        let mut state = self.state.lock().expect("ledger writer lock");
        let key = rec.key();
        if state.keys.contains(&key) {
            return Err(PipelineError::DuplicateTrial { key });
        }
        state
            .file
            .write_all(line.as_bytes())
            .and_then(|_| state.file.flush())
            .map_err(|e| io_err(&self.path, e))?;
        state.keys.insert(key);
        Ok(())
    }
}
