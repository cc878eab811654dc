//! Chat transports: a remote HTTP client and a scripted offline stand-in.
//!
//! Every request is identified by a digest over its canonical payload
//! encoding, which doubles as the response-cache key. The scripted transport
//! reads a rule book from JSON and serves deterministic replies so whole
//! audits can run with no network at all.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::detrng::DetRng;
use crate::pipeline::TokenUsage;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("endpoint {url} unreachable after {attempts} attempts: {last}")]
    EndpointUnreachable {
        url: String,
        attempts: u32,
        last: String,
    },
    #[error("endpoint rejected credentials (HTTP {status})")]
    AuthRejected { status: u16 },
    #[error("api key environment variable {env:?} is not set")]
    MissingApiKey { env: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed reply: {reason}")]
    MalformedReply { reason: String },
    #[error("cache entry {path} is corrupt: {reason}")]
    CacheCorrupt { path: String, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("script book: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Decoding parameters, pinned per audit so reruns hit the cache.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Which side of the protocol issued a request. Not part of the wire payload;
/// used for script dispatch and logging only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PurposeTag {
    Router,
    Worker,
}

impl PurposeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PurposeTag::Router => "router",
            PurposeTag::Worker => "worker",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub params: GenParams,
    pub purpose: PurposeTag,
}

impl ChatRequest {
    /// Canonical payload encoding. Only fields that reach the endpoint enter
    /// the digest, so router and worker requests with identical payloads are
    /// cache hits for each other.
    fn canonical(&self) -> String {
        let mut s = String::from("chatreq/v1");
        s.push('\u{1e}');
        s.push_str(&self.model_id);
        s.push('\u{1e}');
        s.push_str(&format!("{:?}", self.params.temperature));
        s.push('\u{1e}');
        s.push_str(&self.params.max_tokens.to_string());
        for m in &self.messages {
            s.push('\u{1e}');
            s.push_str(m.role.as_str());
            s.push('\u{1f}');
            s.push_str(&m.content);
        }
        s
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        hex::encode(h.finalize())
    }

    fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub content: String,
    pub usage: Option<TokenUsage>,
    pub latency_ms: u64,
}

pub trait ChatTransport: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ModelError>;
    fn name(&self) -> &str;
}

// ---------------------------------------------------------------------------
// Remote endpoint

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RemoteConfig {
    /// Base URL; requests go to {base_url}/chat/completions.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token. The token
    /// itself is read at construction time and never written anywhere.
    #[serde(default)]
    pub key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
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

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8080/v1".into(),
            key_env: None,
            timeout_secs: default_timeout_secs(),
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
        }
    }
}

pub struct RemoteTransport {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    bearer: Option<String>,
    jitter: Mutex<DetRng>,
}

impl std::fmt::Debug for RemoteTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // never expose the token, even redacted-length
        f.debug_struct("RemoteTransport")
            .field("base_url", &self.cfg.base_url)
            .field("bearer", &self.bearer.as_ref().map(|_| "<set>"))
            .finish()
    }
}

#[derive(serde::Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(serde::Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(serde::Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(serde::Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(serde::Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl RemoteTransport {
    pub fn new(cfg: RemoteConfig) -> Result<RemoteTransport, ModelError> {
        let bearer = match &cfg.key_env {
            Some(env) => match std::env::var(env) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => return Err(ModelError::MissingApiKey { env: env.clone() }),
            },
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ModelError::EndpointUnreachable {
                url: cfg.base_url.clone(),
                attempts: 0,
                last: e.to_string(),
            })?;
        let seed = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        Ok(RemoteTransport {
            cfg,
            client,
            bearer,
            jitter: Mutex::new(DetRng::from_key(&[seed, 0x6a69_7474_6572])),
        })
    }

    fn backoff(&self, attempt: u32) {
        let exp = self
            .cfg
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(16));
        let upper = exp.min(self.cfg.backoff_cap_ms);
        let ms = self.jitter.lock().expect("jitter lock").below(upper + 1);
        std::thread::sleep(Duration::from_millis(ms));
    }
}

impl ChatTransport for RemoteTransport {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ModelError> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = WireRequest {
            model: &req.model_id,
            messages: &req.messages,
            temperature: req.params.temperature,
            max_tokens: req.params.max_tokens,
        };
        let mut last = String::from("no attempt made");
        for attempt in 0..self.cfg.max_attempts {
            if attempt > 0 {
                self.backoff(attempt - 1);
            }
            let started = Instant::now();
            let mut builder = self.client.post(&url).json(&body);
            if let Some(tok) = &self.bearer {
                builder = builder.bearer_auth(tok);
            }
            let resp = match builder.send() {
                Ok(r) => r,
                Err(e) if e.is_connect() || e.is_timeout() || e.is_request() => {
                    last = scrub(&e.to_string());
                    log::warn!(
                        "attempt {}/{} to {url} failed: {last}",
                        attempt + 1,
                        self.cfg.max_attempts
                    );
                    continue;
                }
                Err(e) => {
                    last = scrub(&e.to_string());
                    continue;
                }
            };
            let status = resp.status().as_u16();
            match status {
                200 => {
                    let wire: WireReply = resp.json().map_err(|e| ModelError::MalformedReply {
                        reason: scrub(&e.to_string()),
                    })?;
                    let choice = wire.choices.into_iter().next().ok_or_else(|| {
                        ModelError::MalformedReply {
                            reason: "reply has no choices".into(),
                        }
                    })?;
                    return Ok(ChatReply {
                        content: choice.message.content,
                        usage: wire.usage.map(|u| TokenUsage {
                            prompt_tokens: u.prompt_tokens,
                            completion_tokens: u.completion_tokens,
                        }),
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                401 | 403 => return Err(ModelError::AuthRejected { status }),
                429 | 500..=599 => {
                    last = format!("HTTP {status}");
                    log::warn!(
                        "attempt {}/{} to {url} got {last}, backing off",
                        attempt + 1,
                        self.cfg.max_attempts
                    );
                    continue;
                }
                _ => {
                    let body = resp.text().unwrap_or_default();
                    return Err(ModelError::Http {
                        status,
                        body: truncate(&scrub(&body), 300),
                    });
                }
            }
        }
        Err(ModelError::EndpointUnreachable {
            url,
            attempts: self.cfg.max_attempts,
            last,
        })
    }

    fn name(&self) -> &str {
        "remote"
    }
}

/// Strip anything that looks like a bearer token from error text before it
/// can reach a log line or an error chain.
fn scrub(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        let lower = rest.to_ascii_lowercase();
        let Some(pos) = lower.find("bearer ") else {
            out.push_str(rest);
            return out;
        };
        let end = pos + "bearer ".len();
        out.push_str(&rest[..end]);
        out.push_str("<redacted>");
        let tail = &rest[end..];
        let tok_len = tail
            .find(|c: char| c.is_whitespace() || c == '"' || c == '\'')
            .unwrap_or(tail.len());
        rest = &tail[tok_len..];
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut cut = max;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}...", &s[..cut])
    }
}

// ---------------------------------------------------------------------------
// Scripted transport

/// One dispatch rule. All present conditions must hold for the rule to match;
/// rules are tried in order and the first match wins.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScriptRule {
    /// "router", "worker", or "any" (default).
    #[serde(default)]
    pub when: Option<String>,
    /// Exact request digest to match.
    #[serde(default)]
    pub digest: Option<String>,
    /// Substring of the last user message.
    #[serde(default)]
    pub contains: Option<String>,
    /// Literal reply text.
    #[serde(default)]
    pub reply: Option<String>,
    /// Regex with one capture group, applied to the last user message; the
    /// capture becomes the reply. Exactly one of reply/echo_capture.
    #[serde(default)]
    pub echo_capture: Option<String>,
}

/// Fault injection: after `after_calls` successful calls, the next `times`
/// calls fail as if the network dropped.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FaultSpec {
    pub after_calls: u64,
    pub times: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScriptBook {
    pub schema: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default_reply: Option<String>,
    #[serde(default)]
    pub fail_after: Option<FaultSpec>,
}

pub const SCRIPTBOOK_SCHEMA: &str = "scriptbook/v1";

impl ScriptBook {
    pub fn from_json(text: &str) -> Result<ScriptBook, ModelError> {
        let book: ScriptBook =
            serde_json::from_str(text).map_err(|e| ModelError::Script(e.to_string()))?;
        if book.schema != SCRIPTBOOK_SCHEMA {
            return Err(ModelError::Script(format!(
                "unsupported schema {:?}, expected {SCRIPTBOOK_SCHEMA:?}",
                book.schema
            )));
        }
        for (i, rule) in book.rules.iter().enumerate() {
            if rule.reply.is_some() == rule.echo_capture.is_some() {
                return Err(ModelError::Script(format!(
                    "rule {i}: exactly one of reply/echo_capture is required"
                )));
            }
            if let Some(w) = &rule.when {
                if !matches!(w.as_str(), "router" | "worker" | "any") {
                    return Err(ModelError::Script(format!(
                        "rule {i}: unknown when {w:?}"
                    )));
                }
            }
            if let Some(pat) = &rule.echo_capture {
                regex::Regex::new(pat)
                    .map_err(|e| ModelError::Script(format!("rule {i}: bad regex: {e}")))?;
            }
        }
        Ok(book)
    }

    pub fn load(path: &Path) -> Result<ScriptBook, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        ScriptBook::from_json(&text)
    }
}

/// One served request, for assertions in tests and for audit trails.
#[derive(Debug, Clone)]
pub struct ScriptLogEntry {
    pub index: u64,
    pub purpose: PurposeTag,
    pub digest: String,
    pub matched_rule: Option<usize>,
}

pub struct ScriptedTransport {
    book: ScriptBook,
    calls: Mutex<u64>,
    log: Mutex<Vec<ScriptLogEntry>>,
}

impl ScriptedTransport {
    pub fn new(book: ScriptBook) -> ScriptedTransport {
        ScriptedTransport {
            book,
            calls: Mutex::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> u64 {
        *self.calls.lock().expect("calls lock")
    }

    pub fn log(&self) -> Vec<ScriptLogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    fn rule_matches(rule: &ScriptRule, req: &ChatRequest) -> bool {
        if let Some(w) = &rule.when {
            let ok = match w.as_str() {
                "router" => req.purpose == PurposeTag::Router,
                "worker" => req.purpose == PurposeTag::Worker,
                _ => true,
            };
            if !ok {
                return false;
            }
        }
        if let Some(d) = &rule.digest {
            if *d != req.digest() {
                return false;
            }
        }
        if let Some(c) = &rule.contains {
            if !req.last_user_content().contains(c.as_str()) {
                return false;
            }
        }
        true
    }
}

impl ChatTransport for ScriptedTransport {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ModelError> {
        let index = {
            let mut calls = self.calls.lock().expect("calls lock");
            *calls += 1;
            *calls
        };
        if let Some(fault) = &self.book.fail_after {
            if index > fault.after_calls && index <= fault.after_calls + fault.times {
                return Err(ModelError::EndpointUnreachable {
                    url: "scripted".into(),
                    attempts: 1,
                    last: format!("injected fault on call {index}"),
                });
            }
        }
        let mut matched_rule = None;
        let mut reply_text = None;
        for (i, rule) in self.book.rules.iter().enumerate() {
            if !Self::rule_matches(rule, req) {
                continue;
            }
            matched_rule = Some(i);
            reply_text = Some(match (&rule.reply, &rule.echo_capture) {
                (Some(r), _) => r.clone(),
                (None, Some(pat)) => {
                    let re = regex::Regex::new(pat).expect("validated at load");
                    let caps = re.captures(req.last_user_content()).ok_or_else(|| {
                        ModelError::Script(format!(
                            "rule {i} echo_capture matched conditions but regex found nothing"
                        ))
                    })?;
                    caps.get(1)
                        .map(|m| m.as_str().to_string())
                        .ok_or_else(|| {
                            ModelError::Script(format!("rule {i}: regex has no capture group"))
                        })?
                }
                (None, None) => unreachable!("validated at load"),
            });
            break;
        }
        self.log.lock().expect("log lock").push(ScriptLogEntry {
            index,
            purpose: req.purpose,
            digest: req.digest(),
            matched_rule,
        });
        let content = match reply_text {
            Some(t) => t,
            None => self.book.default_reply.clone().ok_or_else(|| {
                ModelError::Script(format!(
                    "no rule matched {} request and no default_reply set",
                    req.purpose.as_str()
                ))
            })?,
        };
        let usage = Some(TokenUsage {
            prompt_tokens: req
                .messages
                .iter()
                .map(|m| m.content.split_whitespace().count() as u64)
                .sum(),
            completion_tokens: content.split_whitespace().count() as u64,
        });
        Ok(ChatReply {
            content,
            usage,
            latency_ms: 0,
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

// ---------------------------------------------------------------------------
// Response cache

pub const CACHE_SCHEMA: &str = "chatcache/v1";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CacheRecord {
    schema: String,
    digest: String,
    model_id: String,
    content: String,
    usage: Option<TokenUsage>,
    /// sha256 of the content field, so a torn write never grades a trial.
    checksum: String,
}

fn content_checksum(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"chatcache/v1\x1e");
    h.update(content.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> ResponseCache {
        ResponseCache { dir: dir.into() }
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        let shard = digest.get(..2).unwrap_or("00");
        self.dir.join(shard).join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<ChatReply>, ModelError> {
        let path = self.path_for(digest);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(ModelError::Io {
                    path: path.display().to_string(),
                    source: e,
                })
            }
        };
        let rec: CacheRecord =
            serde_json::from_str(&text).map_err(|e| ModelError::CacheCorrupt {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        if rec.schema != CACHE_SCHEMA {
            return Err(ModelError::CacheCorrupt {
                path: path.display().to_string(),
                reason: format!("schema {:?}", rec.schema),
            });
        }
        if rec.digest != digest {
            return Err(ModelError::CacheCorrupt {
                path: path.display().to_string(),
                reason: "digest does not match file name".into(),
            });
        }
        if rec.checksum != content_checksum(&rec.content) {
            return Err(ModelError::CacheCorrupt {
                path: path.display().to_string(),
                reason: "checksum mismatch".into(),
            });
        }
        Ok(Some(ChatReply {
            content: rec.content,
            usage: rec.usage,
            latency_ms: 0,
        }))
    }

    pub fn put(&self, req: &ChatRequest, reply: &ChatReply) -> Result<(), ModelError> {
        let digest = req.digest();
        let path = self.path_for(&digest);
        let parent = path.parent().expect("cache path has parent");
        std::fs::create_dir_all(parent).map_err(|e| ModelError::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
        let rec = CacheRecord {
            schema: CACHE_SCHEMA.into(),
            digest: digest.clone(),
            model_id: req.model_id.clone(),
            content: reply.content.clone(),
            usage: reply.usage,
            checksum: content_checksum(&reply.content),
        };
        // Unique temp name per writer: the same request can be in flight on
        // several worker threads at once (e.g. router 1's prompt is shared by
        // every noisy condition of a question), and rename is the atomic
        // publish step. A shared temp path would let one writer rename the
        // other's file away mid-write.
        static PUT_SERIAL: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let serial = PUT_SERIAL.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let tmp = path.with_extension(format!("{}.{serial}.tmp", std::process::id()));
        let mut f = std::fs::File::create(&tmp).map_err(|e| ModelError::Io {
            path: tmp.display().to_string(),
            source: e,
        })?;
        f.write_all(serde_json::to_string(&rec).expect("serializable").as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| ModelError::Io {
                path: tmp.display().to_string(),
                source: e,
            })?;
        std::fs::rename(&tmp, &path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }
}

/// Serve a request through the cache: a hit skips the transport entirely, a
/// miss calls it and persists the reply. Returns the reply and whether it
/// came from the cache.
pub fn cached_chat(
    transport: &dyn ChatTransport,
    cache: Option<&ResponseCache>,
    req: &ChatRequest,
) -> Result<(ChatReply, bool), ModelError> {
    if let Some(cache) = cache {
        let digest = req.digest();
        if let Some(hit) = cache.get(&digest)? {
            return Ok((hit, true));
        }
        let reply = transport.chat(req)?;
        cache.put(req, &reply)?;
        Ok((reply, false))
    } else {
        Ok((transport.chat(req)?, false))
    }
}

/// A map of counters describing cache traffic, surfaced in run summaries.
#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct TransportStats {
    pub requests: u64,
    pub cache_hits: u64,
}

impl TransportStats {
    pub fn as_map(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([("requests", self.requests), ("cache_hits", self.cache_hits)])
    }
}
