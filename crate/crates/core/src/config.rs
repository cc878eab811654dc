//! Run configuration: one declarative TOML document that fully determines an
//! audit. Secrets never appear here; model entries name an environment
//! variable and the token is read from the process environment at transport
//! construction time.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_benchmark, sample_questions, CorpusError, CorpusFormat};
use crate::modelio::{
    ModelError, RemoteConfig, RemoteTransport, ScriptBook, ScriptedTransport,
};
use crate::pipeline::{AuditRun, ModelLane, PipelineError, PromptTemplates};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_sample_n() -> usize {
    100
}
fn default_sample_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Corpus file, relative to the config file's directory.
    pub path: String,
    #[serde(default)]
    pub format: CorpusFormat,
    #[serde(default = "default_sample_n")]
    pub sample_n: usize,
    #[serde(default = "default_sample_seed")]
    pub sample_seed: u64,
}

fn default_max_routers() -> u32 {
    9
}
fn default_temperature() -> f64 {
    0.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_concurrency() -> usize {
    4
}
fn default_cache_replies() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// M: noisy conditions run with r = 1..=max_routers parallel routers.
    #[serde(default = "default_max_routers")]
    pub max_routers: u32,
    #[serde(default = "default_sample_seed")]
    pub condition_seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_cache_replies")]
    pub cache_replies: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            max_routers: default_max_routers(),
            condition_seed: default_sample_seed(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            concurrency: default_concurrency(),
            cache_replies: default_cache_replies(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    /// Template directory relative to the config file; built-in templates
    /// when absent.
    #[serde(default)]
    pub dir: Option<String>,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_attempts() -> u32 {
    5
}
fn default_backoff_base_ms() -> u64 {
    1000
}
fn default_backoff_cap_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrySection {
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
}

impl Default for RetrySection {
    fn default() -> Self {
        RetrySection {
            timeout_secs: default_timeout_secs(),
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    /// Identity recorded in the ledger and reports.
    pub id: String,
    /// `http(s)://host` for a chat-completions endpoint, or
    /// `scripted:relative/path.json` for an offline script book.
    pub endpoint: String,
    /// Environment variable holding the bearer token for this endpoint.
    /// Only the variable name lives in config; the value is read from the
    /// environment and never persisted.
    #[serde(default)]
    pub key_env: Option<String>,
    /// Endpoint-side model name for the router role; defaults to `id`.
    #[serde(default)]
    pub router_model: Option<String>,
    /// Endpoint-side model name for the worker role; defaults to `id`.
    #[serde(default)]
    pub worker_model: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub prompts: PromptSection,
    #[serde(default)]
    pub retry: RetrySection,
    pub models: Vec<ModelEntry>,
}

impl AuditConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<AuditConfig, ConfigError> {
        let cfg: AuditConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; returns the config together with the directory all
    /// relative paths resolve against.
    pub fn load(path: &Path) -> Result<(AuditConfig, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = AuditConfig::from_toml(&text, &path.display().to_string())?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.corpus.sample_n < 1 {
            return Err(ConfigError::Invalid("corpus.sample_n must be >= 1".into()));
        }
        if self.protocol.max_routers < 1 {
            return Err(ConfigError::Invalid(
                "protocol.max_routers must be >= 1".into(),
            ));
        }
        if self.protocol.concurrency < 1 {
            return Err(ConfigError::Invalid(
                "protocol.concurrency must be >= 1".into(),
            ));
        }
        if !self.protocol.temperature.is_finite() || self.protocol.temperature < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "protocol.temperature must be finite and >= 0, got {}",
                self.protocol.temperature
            )));
        }
        if self.protocol.max_tokens < 1 {
            return Err(ConfigError::Invalid(
                "protocol.max_tokens must be >= 1".into(),
            ));
        }
        if self.models.is_empty() {
            return Err(ConfigError::Invalid("at least one model required".into()));
        }
        let mut ids = BTreeSet::new();
        for m in &self.models {
            if m.id.trim().is_empty() {
                return Err(ConfigError::Invalid("model id must be non-empty".into()));
            }
            if !ids.insert(m.id.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate model id {:?}", m.id)));
            }
            let is_http =
                m.endpoint.starts_with("http://") || m.endpoint.starts_with("https://");
            let is_scripted = m.endpoint.starts_with("scripted:");
            if !is_http && !is_scripted {
                return Err(ConfigError::Invalid(format!(
                    "model {:?}: endpoint must be http(s)://... or scripted:path, got {:?}",
                    m.id, m.endpoint
                )));
            }
            if is_scripted && m.key_env.is_some() {
                return Err(ConfigError::Invalid(format!(
                    "model {:?}: scripted endpoints take no key_env",
                    m.id
                )));
            }
        }
        Ok(())
    }

    pub fn router_model_of(m: &ModelEntry) -> &str {
        m.router_model.as_deref().unwrap_or(&m.id)
    }

    pub fn worker_model_of(m: &ModelEntry) -> &str {
        m.worker_model.as_deref().unwrap_or(&m.id)
    }
}

/// Hash of everything that determines what an audit measures: the corpus
/// bytes and sampling parameters, the condition grid and generation
/// parameters, the model roster, and the prompt templates. Execution details
/// (concurrency, retry policy, output location, key-env names) are excluded
/// so a resumed run may change them freely.
pub fn config_digest(
    cfg: &AuditConfig,
    corpus_digest: &str,
    templates: &PromptTemplates,
) -> String {
    let mut s = String::from("auditcfg/v1");
    s.push_str(&format!(
        "\x1ecorpus {corpus_digest} n={} seed={}",
        cfg.corpus.sample_n, cfg.corpus.sample_seed
    ));
    s.push_str(&format!(
        "\x1eprotocol M={} cseed={} temp={:?} max_tokens={}",
        cfg.protocol.max_routers,
        cfg.protocol.condition_seed,
        cfg.protocol.temperature,
        cfg.protocol.max_tokens
    ));
    for (name, digest) in templates.file_digests() {
        s.push_str(&format!("\x1etemplate {name} {digest}"));
    }
    for m in &cfg.models {
        s.push_str(&format!(
            "\x1emodel {} endpoint={} router={} worker={}",
            m.id,
            m.endpoint,
            AuditConfig::router_model_of(m),
            AuditConfig::worker_model_of(m)
        ));
    }
    sha256_hex(s.as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

fn build_transport(
    m: &ModelEntry,
    base: &Path,
    retry: &RetrySection,
) -> Result<Arc<dyn crate::modelio::ChatTransport>, ConfigError> {
    if let Some(rel) = m.endpoint.strip_prefix("scripted:") {
        let path = base.join(rel);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let book = ScriptBook::from_json(&text)?;
        return Ok(Arc::new(ScriptedTransport::new(book)));
    }
    let remote = RemoteTransport::new(RemoteConfig {
        base_url: m.endpoint.clone(),
        key_env: m.key_env.clone(),
        timeout_secs: retry.timeout_secs,
        max_attempts: retry.max_attempts,
        backoff_base_ms: retry.backoff_base_ms,
        backoff_cap_ms: retry.backoff_cap_ms,
    })?;
    Ok(Arc::new(remote))
}

/// Turn a validated config into an executable plan. Loads and samples the
/// corpus, loads templates, resolves each model's transport, and computes the
/// config digest. Reads only; the run directory is not touched, so a config
/// that fails here leaves no trace on disk.
pub fn build_audit(
    cfg: &AuditConfig,
    base: &Path,
    out_dir: &Path,
) -> Result<AuditRun, ConfigError> {
    let corpus_path = base.join(&cfg.corpus.path);
    let corpus_bytes = std::fs::read(&corpus_path).map_err(|source| CorpusError::Io {
        path: corpus_path.display().to_string(),
        source,
    })?;
    let corpus_digest = sha256_hex(&corpus_bytes);
    let full = load_benchmark(&corpus_path, cfg.corpus.format)?;
    let questions = sample_questions(&full, cfg.corpus.sample_n, cfg.corpus.sample_seed)?;

    let templates = match &cfg.prompts.dir {
        Some(dir) => PromptTemplates::load(&base.join(dir))?,
        None => PromptTemplates::builtin(),
    };
    let digest = config_digest(cfg, &corpus_digest, &templates);

    let mut lanes = Vec::with_capacity(cfg.models.len());
    for m in &cfg.models {
        let transport = build_transport(m, base, &cfg.retry)?;
        lanes.push(ModelLane {
            model_id: m.id.clone(),
            router_model: AuditConfig::router_model_of(m).to_string(),
            worker_model: AuditConfig::worker_model_of(m).to_string(),
            router: Arc::clone(&transport),
            worker: transport,
        });
    }

    Ok(AuditRun {
        run_id: None,
        config_digest: digest,
        questions,
        lanes,
        max_routers: cfg.protocol.max_routers,
        condition_seed: cfg.protocol.condition_seed,
        templates,
        params: crate::modelio::GenParams {
            temperature: cfg.protocol.temperature,
            max_tokens: cfg.protocol.max_tokens,
        },
        concurrency: cfg.protocol.concurrency,
        run_dir: out_dir.to_path_buf(),
        cache_replies: cfg.protocol.cache_replies,
    })
}
