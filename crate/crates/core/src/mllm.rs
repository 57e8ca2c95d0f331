//! Multimodal LLM transport.
//!
//! Every request passes through [`MllmRequest::new`], which refuses images
//! whose source label is on the active denylist. Backends:
//!
//! - [`MockClient`]: scripted replies (echo, fixed text, failure) keyed by rule
//! - [`ReplayClient`]: answers from a fingerprint-keyed [`ReplayStore`]
//! - [`RecordingClient`]: wraps another backend and persists what it answers
//! - [`LiveClient`]: POSTs a JSON body to an HTTP endpoint
//!
//! [`AuditedClient`] wraps any of them and appends one redacted record per
//! query (no prompt text, no image bytes).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::append_json_line;
use crate::detection::FilterPolicy;
use crate::ids::ConversationId;
use crate::scene::ColorFrame;

pub const LIVE_TIMEOUT: Duration = Duration::from_secs(10);
const FINGERPRINT_DOMAIN: &[u8] = b"aor-mllm-fp/1\n";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MllmError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no recorded reply for fingerprint {0}")]
    ReplayMiss(String),
    #[error("malformed reply: {0}")]
    Protocol(String),
    #[error("store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("image labeled {label:?} is denylisted and may not be sent")]
pub struct PrivacyViolation {
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub role: Role,
    pub text: String,
}

/// An image attachment and the detector labels of everything in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestImage {
    pub labels: Vec<String>,
    pub image: ColorFrame,
}

impl RequestImage {
    pub fn new(label: impl Into<String>, image: ColorFrame) -> Self {
        Self {
            labels: vec![label.into()],
            image,
        }
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.image.width().to_le_bytes());
        h.update(self.image.height().to_le_bytes());
        h.update(self.image.data());
        h.finalize().into()
    }
}

/// A privacy-checked query. Only constructible through [`MllmRequest::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MllmRequest {
    conversation: ConversationId,
    history: Vec<HistoryTurn>,
    images: Vec<RequestImage>,
    prompt: String,
}

impl MllmRequest {
    pub fn new(
        conversation: ConversationId,
        history: Vec<HistoryTurn>,
        images: Vec<RequestImage>,
        prompt: impl Into<String>,
        policy: &FilterPolicy,
    ) -> Result<Self, PrivacyViolation> {
        if let Some(label) = images
            .iter()
            .flat_map(|i| i.labels.iter())
            .find(|l| policy.is_denied(l))
        {
            return Err(PrivacyViolation {
                label: label.clone(),
            });
        }
        Ok(Self {
            conversation,
            history,
            images,
            prompt: prompt.into(),
        })
    }

    pub fn conversation(&self) -> ConversationId {
        self.conversation
    }

    pub fn history(&self) -> &[HistoryTurn] {
        &self.history
    }

    pub fn images(&self) -> &[RequestImage] {
        &self.images
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn labels(&self) -> Vec<String> {
        self.images.iter().flat_map(|i| i.labels.iter().cloned()).collect()
    }

    /// SHA-256 over the prompt, the history turns and the image content
    /// hashes, each length-prefixed, in order. Lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(FINGERPRINT_DOMAIN);
        put_bytes(&mut h, self.prompt.as_bytes());
        h.update((self.history.len() as u64).to_le_bytes());
        for turn in &self.history {
            put_bytes(&mut h, turn.role.as_str().as_bytes());
            put_bytes(&mut h, turn.text.as_bytes());
        }
        h.update((self.images.len() as u64).to_le_bytes());
        for img in &self.images {
            h.update(img.content_hash());
        }
        hex::encode(h.finalize())
    }

    /// JSON body for the live endpoint.
    pub fn wire_body(&self) -> serde_json::Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        serde_json::json!({
            "conversation_id": self.conversation,
            "prompt": self.prompt,
            "history": self.history,
            "images": self.images.iter().map(|i| b64.encode(i.image.to_png())).collect::<Vec<_>>(),
        })
    }
}

fn put_bytes(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MllmReply {
    pub text: String,
    pub latency_ms: u64,
    pub backend: String,
}

pub trait MllmClient: Send + Sync {
    fn tag(&self) -> &str;

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError>;
}

impl<T: MllmClient + ?Sized> MllmClient for Arc<T> {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        (**self).query(req)
    }
}

impl<T: MllmClient + ?Sized> MllmClient for Box<T> {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        (**self).query(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponse {
    Echo,
    Fixed(String),
    Fail(String),
}

/// `when` matches a substring of the prompt; `None` matches anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub when: Option<String>,
    pub then: MockResponse,
}

/// First matching rule wins; no match echoes the prompt.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    rules: Vec<MockRule>,
}

impl MockClient {
    pub fn echo() -> Self {
        Self::default()
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self::with_rules(vec![MockRule {
            when: None,
            then: MockResponse::Fixed(text.into()),
        }])
    }

    pub fn failing(msg: impl Into<String>) -> Self {
        Self::with_rules(vec![MockRule {
            when: None,
            then: MockResponse::Fail(msg.into()),
        }])
    }

    pub fn with_rules(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    pub fn from_rules_file(path: &Path) -> Result<Self, MllmError> {
        let text = fs::read_to_string(path).map_err(|e| MllmError::Store(format!("{}: {e}", path.display())))?;
        let rules = serde_json::from_str(&text)
            .map_err(|e| MllmError::Store(format!("{}: {e}", path.display())))?;
        Ok(Self::with_rules(rules))
    }
}

impl MllmClient for MockClient {
    fn tag(&self) -> &str {
        "mock"
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        let rule = self
            .rules
            .iter()
            .find(|r| r.when.as_deref().is_none_or(|w| req.prompt.contains(w)));
        let text = match rule.map(|r| &r.then) {
            None | Some(MockResponse::Echo) => req.prompt.clone(),
            Some(MockResponse::Fixed(t)) => t.clone(),
            Some(MockResponse::Fail(m)) => return Err(MllmError::Backend(m.clone())),
        };
        Ok(MllmReply {
            text,
            latency_ms: 0,
            backend: "mock".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub fingerprint: String,
    pub text: String,
    /// Human-readable hint of what was asked; not used for matching.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Recorded replies keyed by request fingerprint, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayStore {
    entries: IndexMap<String, ReplayEntry>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fingerprint: &str) -> Option<&ReplayEntry> {
        self.entries.get(fingerprint)
    }

    /// Returns false when the fingerprint was already present.
    pub fn insert(&mut self, entry: ReplayEntry) -> bool {
        if self.entries.contains_key(&entry.fingerprint) {
            return false;
        }
        self.entries.insert(entry.fingerprint.clone(), entry);
        true
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.values()
    }

    /// Load one `.jsonl` file, or every `.jsonl` file of a directory in name order.
    pub fn load(path: &Path) -> Result<Self, MllmError> {
        let mut files = Vec::new();
        if path.is_dir() {
            let rd = fs::read_dir(path).map_err(|e| store_err(path, e))?;
            for entry in rd {
                let p = entry.map_err(|e| store_err(path, e))?.path();
                if p.extension().is_some_and(|e| e == "jsonl") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut store = Self::new();
        for file in files {
            let text = fs::read_to_string(&file).map_err(|e| store_err(&file, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: ReplayEntry = serde_json::from_str(line)
                    .map_err(|e| MllmError::Store(format!("{}:{}: {e}", file.display(), i + 1)))?;
                store.insert(entry);
            }
        }
        Ok(store)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MllmError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| store_err(path, e))
    }
}

fn store_err(path: &Path, e: std::io::Error) -> MllmError {
    MllmError::Store(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone)]
pub struct ReplayClient {
    store: ReplayStore,
}

impl ReplayClient {
    pub fn new(store: ReplayStore) -> Self {
        Self { store }
    }

    pub fn open(path: &Path) -> Result<Self, MllmError> {
        Ok(Self::new(ReplayStore::load(path)?))
    }
}

impl MllmClient for ReplayClient {
    fn tag(&self) -> &str {
        "replay"
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        let fp = req.fingerprint();
        let entry = self.store.get(&fp).ok_or(MllmError::ReplayMiss(fp))?;
        Ok(MllmReply {
            text: entry.text.clone(),
            latency_ms: 0,
            backend: "replay".into(),
        })
    }
}

/// Forwards to `inner` and persists each new (fingerprint, reply) pair.
/// A request already in the store is answered from it without forwarding.
pub struct RecordingClient<C> {
    inner: C,
    store: Mutex<ReplayStore>,
    path: PathBuf,
}

impl<C: MllmClient> RecordingClient<C> {
    /// Starts from the existing store at `path`, if any.
    pub fn new(inner: C, path: impl Into<PathBuf>) -> Result<Self, MllmError> {
        let path = path.into();
        let store = if path.exists() {
            ReplayStore::load(&path)?
        } else {
            ReplayStore::new()
        };
        Ok(Self {
            inner,
            store: Mutex::new(store),
            path,
        })
    }

    pub fn store(&self) -> ReplayStore {
        self.store.lock().expect("store lock").clone()
    }
}

impl<C: MllmClient> MllmClient for RecordingClient<C> {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        let fp = req.fingerprint();
        if let Some(e) = self.store.lock().expect("store lock").get(&fp) {
            return Ok(MllmReply {
                text: e.text.clone(),
                latency_ms: 0,
                backend: self.inner.tag().to_string(),
            });
        }
        let reply = self.inner.query(req)?;
        let mut store = self.store.lock().expect("store lock");
        let mut next = store.clone();
        next.insert(ReplayEntry {
            fingerprint: fp,
            text: reply.text.clone(),
            note: request_note(req),
        });
        next.save(&self.path)?;
        *store = next;
        Ok(reply)
    }
}

fn request_note(req: &MllmRequest) -> String {
    let head: String = req.prompt.chars().take(48).collect();
    format!("{} [{}] {}", req.conversation, req.labels().join(", "), head)
}

/// HTTP backend speaking this runtime's JSON schema:
/// `{conversation_id, prompt, history: [{role, text}], images: [base64 PNG]}`
/// answered by `{text}`.
pub struct LiveClient {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
    timeout: Duration,
}

impl LiveClient {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        Self::with_timeout(url, token, LIVE_TIMEOUT)
    }

    pub fn with_timeout(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            url: url.into(),
            token,
            agent,
            timeout,
        }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, MllmError> {
        let mut req = self.agent.post(&self.url).header("content-type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let bytes = serde_json::to_vec(body).expect("body serializes");
        let mut resp = req.send(&bytes[..]).map_err(|e| self.map_err(e))?;
        if !resp.status().is_success() {
            return Err(MllmError::Backend(format!("HTTP {}", resp.status())));
        }
        let text = resp.body_mut().read_to_string().map_err(|e| self.map_err(e))?;
        #[derive(Deserialize)]
        struct Answer {
            text: String,
        }
        let a: Answer = serde_json::from_str(&text).map_err(|e| MllmError::Protocol(e.to_string()))?;
        Ok(a.text)
    }

    fn map_err(&self, e: ureq::Error) -> MllmError {
        match e {
            ureq::Error::Timeout(_) => MllmError::Timeout(self.timeout),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
                MllmError::Timeout(self.timeout)
            }
            other => MllmError::Unavailable(other.to_string()),
        }
    }
}

impl MllmClient for LiveClient {
    fn tag(&self) -> &str {
        "live"
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        let body = req.wire_body();
        let start = Instant::now();
        // one retry, on timeout only
        let text = match self.attempt(&body) {
            Err(MllmError::Timeout(_)) => self.attempt(&body)?,
            other => other?,
        };
        Ok(MllmReply {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend: "live".into(),
        })
    }
}

/// One line of the audit log. Never holds prompt text or image bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub fingerprint: String,
    pub conversation: ConversationId,
    pub labels: Vec<String>,
    pub prompt_bytes: usize,
    pub history_turns: usize,
    pub image_bytes: usize,
    pub latency_ms: u64,
    pub backend: String,
    pub ok: bool,
}

enum AuditSink {
    File(PathBuf),
    Memory(Vec<AuditRecord>),
}

pub struct AuditedClient<C> {
    inner: C,
    sink: Mutex<AuditSink>,
}

impl<C: MllmClient> AuditedClient<C> {
    pub fn to_file(inner: C, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            sink: Mutex::new(AuditSink::File(path.into())),
        }
    }

    pub fn in_memory(inner: C) -> Self {
        Self {
            inner,
            sink: Mutex::new(AuditSink::Memory(Vec::new())),
        }
    }

    /// Records held in memory, or read back from the log file.
    pub fn records(&self) -> Vec<AuditRecord> {
        match &*self.sink.lock().expect("audit lock") {
            AuditSink::Memory(v) => v.clone(),
            AuditSink::File(p) => read_audit_log(p).unwrap_or_default(),
        }
    }
}

pub fn read_audit_log(path: &Path) -> std::io::Result<Vec<AuditRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

impl<C: MllmClient> MllmClient for AuditedClient<C> {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        let result = self.inner.query(req);
        let record = AuditRecord {
            fingerprint: req.fingerprint(),
            conversation: req.conversation,
            labels: req.labels(),
            prompt_bytes: req.prompt.len(),
            history_turns: req.history.len(),
            image_bytes: req.images.iter().map(|i| i.image.data().len()).sum(),
            latency_ms: result.as_ref().map(|r| r.latency_ms).unwrap_or(0),
            backend: self.inner.tag().to_string(),
            ok: result.is_ok(),
        };
        match &mut *self.sink.lock().expect("audit lock") {
            AuditSink::Memory(v) => v.push(record),
            AuditSink::File(p) => {
                append_json_line(p, &record).map_err(|e| MllmError::Store(format!("{}: {e}", p.display())))?
            }
        }
        result
    }
}

/// Keeps a copy of every request it forwards. Handy for inspecting payloads.
pub struct CaptureClient<C> {
    inner: C,
    requests: Mutex<Vec<MllmRequest>>,
}

impl<C: MllmClient> CaptureClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<MllmRequest> {
        self.requests.lock().expect("capture lock").clone()
    }
}

impl<C: MllmClient> MllmClient for CaptureClient<C> {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn query(&self, req: &MllmRequest) -> Result<MllmReply, MllmError> {
        self.requests.lock().expect("capture lock").push(req.clone());
        self.inner.query(req)
    }
}
