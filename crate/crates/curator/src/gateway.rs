//! Model gateway: every LLM touchpoint goes through one interface.
//!
//! Three modes. `live` speaks OpenAI-compatible chat/embedding JSON over
//! HTTP. `mock` computes responses as a pure function of a stable hash of the
//! request, so full pipelines run offline and reproduce bit-for-bit. `replay`
//! serves responses from a recorded call log and fails on any unseen request,
//! which pins tests to exact transcripts. A scripted backend with canned
//! per-role responses is also available for fixtures.
//!
//! Mock chat understands the task markers the pipeline places in system
//! messages ("[task:tag]", "[task:group]", "[task:rewrite]", "[task:judge]",
//! "[task:referee]", "[task:respond]") and answers in the format the caller
//! parses. Mock embeddings are a seeded sign-projection of hashed n-grams:
//! deterministic, unit-norm, and cosine-meaningful (shared tokens move
//! vectors closer).

use crate::corpus::InstructionRecord;
use crate::featurizer::{hash_ngram_features, FeatureVector, FeaturizerConfig};
use crate::util::{sha256_hex, unit_f64, Fnv64};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayRole {
    Tagger,
    Rewriter,
    Responder,
    Judge,
    Referee,
    Embedder,
    LossScorer,
    RewardScorer,
}

impl GatewayRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            GatewayRole::Tagger => "tagger",
            GatewayRole::Rewriter => "rewriter",
            GatewayRole::Responder => "responder",
            GatewayRole::Judge => "judge",
            GatewayRole::Referee => "referee",
            GatewayRole::Embedder => "embedder",
            GatewayRole::LossScorer => "loss_scorer",
            GatewayRole::RewardScorer => "reward_scorer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Mock,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPhase {
    /// Loss of the published answer under the base difficulty scorer.
    Answer,
    /// Loss under the scorer fine-tuned on the candidate data.
    PostTune,
}

impl LossPhase {
    fn as_str(&self) -> &'static str {
        match self {
            LossPhase::Answer => "answer_loss",
            LossPhase::PostTune => "post_tune_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    250
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: default_retries(), backoff_ms: default_backoff() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_mode")]
    pub mode: GatewayMode,
    /// Base URL of an OpenAI-compatible API, e.g. "http://host:8000/v1".
    #[serde(default)]
    pub endpoint: String,
    /// Name of the environment variable holding the API key (live mode).
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Model id per role; roles absent here use "default".
    #[serde(default)]
    pub models: BTreeMap<GatewayRole, String>,
    #[serde(default)]
    pub default_model: Option<String>,
    /// Upper bound on concurrent outstanding calls.
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Total calls allowed for this gateway's lifetime; None = unlimited.
    #[serde(default)]
    pub call_budget: Option<u64>,
    /// Embedding dimension (mock and fallback projection).
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Texts per embedding call.
    #[serde(default = "default_embed_batch")]
    pub embed_batch: usize,
    /// Seed for all mock behavior.
    #[serde(default)]
    pub mock_seed: u64,
    /// Path of the call log: read in replay mode, appended in other modes.
    #[serde(default)]
    pub replay_log: Option<String>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
}

fn default_mode() -> GatewayMode {
    GatewayMode::Mock
}

fn default_api_key_env() -> String {
    "CURATOR_API_KEY".into()
}

fn default_inflight() -> usize {
    8
}

fn default_embed_dim() -> usize {
    256
}

fn default_embed_batch() -> usize {
    64
}

fn default_timeout() -> u64 {
    120
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            mode: GatewayMode::Mock,
            endpoint: String::new(),
            api_key_env: default_api_key_env(),
            models: BTreeMap::new(),
            default_model: None,
            max_inflight: default_inflight(),
            retry: RetryPolicy::default(),
            call_budget: None,
            embed_dim: default_embed_dim(),
            embed_batch: default_embed_batch(),
            mock_seed: 0,
            replay_log: None,
            request_timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("call budget exhausted")]
    BudgetExhausted,
    #[error("replay miss: no recorded response for request {request_hash}")]
    ReplayMiss { request_hash: String },
    #[error("scripted backend has no response queued for role {0}")]
    ScriptExhausted(&'static str),
    #[error("http error{}: {body}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Http { status: Option<u16>, body: String },
    #[error("unparseable response: {0}")]
    Parse(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("gateway misconfigured: {0}")]
    Config(String),
}

/// Bounded in-flight counter. `acquire` blocks while `max` calls are out.
pub struct InflightGate {
    max: usize,
    state: Mutex<usize>,
    cv: Condvar,
}

impl InflightGate {
    pub fn new(max: usize) -> Self {
        InflightGate { max: max.max(1), state: Mutex::new(0), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.state.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        InflightGuard { gate: self }
    }

    pub fn current(&self) -> usize {
        *self.state.lock().unwrap()
    }
}

pub struct InflightGuard<'a> {
    gate: &'a InflightGate,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.gate.state.lock().unwrap();
        *n -= 1;
        drop(n);
        self.gate.cv.notify_one();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub request_hash: String,
    pub request: Value,
    pub response: Value,
}

/// Canned responses for tests: FIFO per chat role plus score queues.
#[derive(Default)]
pub struct Script {
    chat: Mutex<HashMap<GatewayRole, VecDeque<String>>>,
    answer_loss: Mutex<VecDeque<f64>>,
    post_tune_loss: Mutex<VecDeque<f64>>,
    reward: Mutex<VecDeque<f64>>,
}

impl Script {
    pub fn new() -> Self {
        Script::default()
    }

    pub fn push_chat(&self, role: GatewayRole, response: impl Into<String>) {
        self.chat.lock().unwrap().entry(role).or_default().push_back(response.into());
    }

    pub fn push_loss(&self, phase: LossPhase, value: f64) {
        match phase {
            LossPhase::Answer => self.answer_loss.lock().unwrap().push_back(value),
            LossPhase::PostTune => self.post_tune_loss.lock().unwrap().push_back(value),
        }
    }

    pub fn push_reward(&self, value: f64) {
        self.reward.lock().unwrap().push_back(value);
    }
}

enum Backend {
    Mock,
    Replay(HashMap<String, Value>),
    Scripted(Script),
    Live(LiveBackend),
}

struct LiveBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

pub struct Gateway {
    cfg: GatewayConfig,
    backend: Backend,
    calls_used: AtomicU64,
    inflight: InflightGate,
    recorder: Option<Mutex<BufWriter<File>>>,
}

impl Gateway {
    /// Builds the backend selected by `cfg.mode`.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let backend = match cfg.mode {
            GatewayMode::Mock => Backend::Mock,
            GatewayMode::Replay => {
                let path = cfg
                    .replay_log
                    .as_deref()
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| GatewayError::Config("replay mode requires replay_log".into()))?;
                Backend::Replay(load_replay_log(Path::new(path))?)
            }
            GatewayMode::Live => {
                if cfg.endpoint.is_empty() {
                    return Err(GatewayError::Config("live mode requires an endpoint".into()));
                }
                let client = reqwest::blocking::Client::builder()
                    .timeout(std::time::Duration::from_secs(cfg.request_timeout_secs))
                    .build()
                    .map_err(|e| GatewayError::Config(e.to_string()))?;
                Backend::Live(LiveBackend {
                    client,
                    endpoint: cfg.endpoint.trim_end_matches('/').to_string(),
                    api_key: std::env::var(&cfg.api_key_env).ok(),
                })
            }
        };
        let recorder = match (&cfg.mode, &cfg.replay_log) {
            (GatewayMode::Replay, _) | (_, None) => None,
            (_, Some(path)) if path.is_empty() => None,
            (_, Some(path)) => {
                if let Some(parent) = Path::new(path).parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let file = OpenOptions::new().create(true).append(true).open(path)?;
                Some(Mutex::new(BufWriter::new(file)))
            }
        };
        Ok(Gateway {
            cfg: cfg.clone(),
            backend,
            calls_used: AtomicU64::new(0),
            inflight: InflightGate::new(cfg.max_inflight),
            recorder,
        })
    }

    pub fn mock(seed: u64) -> Self {
        let cfg = GatewayConfig { mock_seed: seed, ..Default::default() };
        Gateway::from_config(&cfg).expect("mock gateway construction cannot fail")
    }

    pub fn scripted(script: Script) -> Self {
        let cfg = GatewayConfig::default();
        Gateway {
            cfg,
            backend: Backend::Scripted(script),
            calls_used: AtomicU64::new(0),
            inflight: InflightGate::new(default_inflight()),
            recorder: None,
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.cfg.call_budget = Some(budget);
        self
    }

    pub fn calls_used(&self) -> u64 {
        self.calls_used.load(Ordering::SeqCst)
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    /// Consumes one budget unit or fails. Retries of the same logical call do
    /// not consume extra units.
    fn take_budget(&self) -> Result<(), GatewayError> {
        match self.cfg.call_budget {
            None => {
                self.calls_used.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Some(budget) => {
                let mut used = self.calls_used.load(Ordering::SeqCst);
                loop {
                    if used >= budget {
                        return Err(GatewayError::BudgetExhausted);
                    }
                    match self.calls_used.compare_exchange(
                        used,
                        used + 1,
                        Ordering::SeqCst,
                        Ordering::SeqCst,
                    ) {
                        Ok(_) => return Ok(()),
                        Err(actual) => used = actual,
                    }
                }
            }
        }
    }

    fn model_for(&self, role: GatewayRole, over: Option<&str>) -> String {
        if let Some(m) = over {
            return m.to_string();
        }
        if let Some(m) = self.cfg.models.get(&role) {
            return m.clone();
        }
        self.cfg.default_model.clone().unwrap_or_else(|| format!("default-{}", role.as_str()))
    }

    fn record(&self, request_hash: &str, request: &Value, response: &Value) {
        if let Some(rec) = &self.recorder {
            let entry = ReplayEntry {
                request_hash: request_hash.to_string(),
                request: request.clone(),
                response: response.clone(),
            };
            let mut w = rec.lock().unwrap();
            let _ = serde_json::to_writer(&mut *w, &entry);
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    }

    pub fn complete_chat(
        &self,
        messages: &[ChatMessage],
        role: GatewayRole,
    ) -> Result<String, GatewayError> {
        self.complete_chat_as(messages, role, None)
    }

    /// Chat completion with an explicit model override (used when several
    /// candidate models answer the same prompt).
    pub fn complete_chat_as(
        &self,
        messages: &[ChatMessage],
        role: GatewayRole,
        model_override: Option<&str>,
    ) -> Result<String, GatewayError> {
        let _slot = self.inflight.acquire();
        self.take_budget()?;
        let model = self.model_for(role, model_override);
        let request = json!({
            "op": "chat",
            "role": role.as_str(),
            "model": model,
            "messages": messages,
        });
        let request_hash = sha256_hex(request.to_string().as_bytes());
        let response: Value = match &self.backend {
            Backend::Mock => Value::String(mock_chat(self.cfg.mock_seed, &model, role, messages)),
            Backend::Replay(log) => log
                .get(&request_hash)
                .cloned()
                .ok_or(GatewayError::ReplayMiss { request_hash: request_hash.clone() })?,
            Backend::Scripted(script) => {
                let mut chat = script.chat.lock().unwrap();
                let queue = chat.entry(role).or_default();
                Value::String(
                    queue.pop_front().ok_or(GatewayError::ScriptExhausted(role.as_str()))?,
                )
            }
            Backend::Live(live) => {
                let body = json!({
                    "model": model,
                    "messages": messages,
                    "temperature": 0,
                });
                let v = self.post_with_retry(live, "/chat/completions", &body)?;
                let content = v
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| GatewayError::Parse(format!("no message content in {v}")))?;
                Value::String(content.to_string())
            }
        };
        self.record(&request_hash, &request, &response);
        match response {
            Value::String(s) => Ok(s),
            other => Err(GatewayError::Parse(format!("expected string response, got {other}"))),
        }
    }

    /// Embeds texts in batches; every vector comes back unit-norm. One budget
    /// unit per batch.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.embed_batch.max(1)) {
            out.extend(self.embed_batch(chunk)?);
        }
        Ok(out)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let _slot = self.inflight.acquire();
        self.take_budget()?;
        let model = self.model_for(GatewayRole::Embedder, None);
        let request = json!({
            "op": "embed",
            "model": model,
            "dim": self.cfg.embed_dim,
            "texts": texts,
        });
        let request_hash = sha256_hex(request.to_string().as_bytes());
        let response = match &self.backend {
            Backend::Mock | Backend::Scripted(_) => {
                let vecs = texts
                    .iter()
                    .map(|t| mock_embed(t, self.cfg.embed_dim, self.cfg.mock_seed))
                    .collect::<Result<Vec<_>, _>>()?;
                serde_json::to_value(vecs).expect("vector serialization")
            }
            Backend::Replay(log) => log
                .get(&request_hash)
                .cloned()
                .ok_or(GatewayError::ReplayMiss { request_hash: request_hash.clone() })?,
            Backend::Live(live) => {
                let body = json!({ "model": model, "input": texts });
                let v = self.post_with_retry(live, "/embeddings", &body)?;
                let data = v
                    .pointer("/data")
                    .and_then(Value::as_array)
                    .ok_or_else(|| GatewayError::Parse(format!("no data array in {v}")))?;
                let mut vecs: Vec<Vec<f32>> = Vec::with_capacity(data.len());
                for item in data {
                    let emb = item
                        .pointer("/embedding")
                        .and_then(Value::as_array)
                        .ok_or_else(|| GatewayError::Parse("missing embedding".into()))?;
                    let mut v: Vec<f32> =
                        emb.iter().filter_map(Value::as_f64).map(|x| x as f32).collect();
                    if v.len() != emb.len() {
                        return Err(GatewayError::Parse("non-numeric embedding entry".into()));
                    }
                    normalize(&mut v)
                        .map_err(|_| GatewayError::Parse("zero-norm embedding".into()))?;
                    vecs.push(v);
                }
                serde_json::to_value(vecs).expect("vector serialization")
            }
        };
        self.record(&request_hash, &request, &response);
        let vecs: Vec<Vec<f32>> =
            serde_json::from_value(response).map_err(|e| GatewayError::Parse(e.to_string()))?;
        if vecs.len() != texts.len() {
            return Err(GatewayError::Parse(format!(
                "embedding count {} differs from input count {}",
                vecs.len(),
                texts.len()
            )));
        }
        Ok(vecs)
    }

    pub fn score_answer_loss(
        &self,
        record: &InstructionRecord,
        phase: LossPhase,
    ) -> Result<f64, GatewayError> {
        let role = GatewayRole::LossScorer;
        let _slot = self.inflight.acquire();
        self.take_budget()?;
        let model = self.model_for(role, None);
        let request = json!({
            "op": "score",
            "kind": phase.as_str(),
            "model": model,
            "id": record.id,
            "text": record.full_text(),
        });
        let request_hash = sha256_hex(request.to_string().as_bytes());
        let response = match &self.backend {
            Backend::Mock => Value::from(mock_loss(self.cfg.mock_seed, record, phase)),
            Backend::Replay(log) => log
                .get(&request_hash)
                .cloned()
                .ok_or(GatewayError::ReplayMiss { request_hash: request_hash.clone() })?,
            Backend::Scripted(script) => {
                let queue = match phase {
                    LossPhase::Answer => &script.answer_loss,
                    LossPhase::PostTune => &script.post_tune_loss,
                };
                let v = queue
                    .lock()
                    .unwrap()
                    .pop_front()
                    .ok_or(GatewayError::ScriptExhausted(phase.as_str()))?;
                Value::from(v)
            }
            Backend::Live(live) => {
                let body = json!({
                    "model": model,
                    "kind": phase.as_str(),
                    "messages": record.conversations,
                });
                let v = self.post_with_retry(live, "/score", &body)?;
                v.pointer("/score")
                    .cloned()
                    .ok_or_else(|| GatewayError::Parse(format!("no score in {v}")))?
            }
        };
        self.record(&request_hash, &request, &response);
        response
            .as_f64()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| GatewayError::Parse(format!("invalid loss value {response}")))
    }

    pub fn score_reward(&self, record: &InstructionRecord) -> Result<f64, GatewayError> {
        let role = GatewayRole::RewardScorer;
        let _slot = self.inflight.acquire();
        self.take_budget()?;
        let model = self.model_for(role, None);
        let request = json!({
            "op": "score",
            "kind": "reward",
            "model": model,
            "id": record.id,
            "text": record.full_text(),
        });
        let request_hash = sha256_hex(request.to_string().as_bytes());
        let response = match &self.backend {
            Backend::Mock => Value::from(mock_reward(self.cfg.mock_seed, record)),
            Backend::Replay(log) => log
                .get(&request_hash)
                .cloned()
                .ok_or(GatewayError::ReplayMiss { request_hash: request_hash.clone() })?,
            Backend::Scripted(script) => {
                let v = script
                    .reward
                    .lock()
                    .unwrap()
                    .pop_front()
                    .ok_or(GatewayError::ScriptExhausted("reward"))?;
                Value::from(v)
            }
            Backend::Live(live) => {
                let body = json!({
                    "model": model,
                    "kind": "reward",
                    "messages": record.conversations,
                });
                let v = self.post_with_retry(live, "/score", &body)?;
                v.pointer("/score")
                    .cloned()
                    .ok_or_else(|| GatewayError::Parse(format!("no score in {v}")))?
            }
        };
        self.record(&request_hash, &request, &response);
        response
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| GatewayError::Parse(format!("invalid reward value {response}")))
    }

    fn post_with_retry(
        &self,
        live: &LiveBackend,
        path: &str,
        body: &Value,
    ) -> Result<Value, GatewayError> {
        let url = format!("{}{}", live.endpoint, path);
        let mut last_err = GatewayError::Http { status: None, body: "no attempt made".into() };
        for attempt in 0..=self.cfg.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(
                    self.cfg.retry.backoff_ms.saturating_mul(1 << (attempt - 1).min(8)),
                ));
            }
            let mut req = live.client.post(&url).json(body);
            if let Some(key) = &live.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| GatewayError::Parse(e.to_string()));
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    let body_text = resp.text().unwrap_or_default();
                    last_err = GatewayError::Http { status: Some(status.as_u16()), body: body_text };
                    if !retryable {
                        return Err(last_err);
                    }
                }
                Err(e) => {
                    last_err = GatewayError::Http { status: None, body: e.to_string() };
                }
            }
        }
        Err(last_err)
    }
}

fn load_replay_log(path: &Path) -> Result<HashMap<String, Value>, GatewayError> {
    let file = File::open(path)?;
    let mut map = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ReplayEntry = serde_json::from_str(&line)
            .map_err(|e| GatewayError::Parse(format!("replay log line {}: {e}", i + 1)))?;
        map.insert(entry.request_hash, entry.response);
    }
    Ok(map)
}

fn normalize(v: &mut [f32]) -> Result<(), ()> {
    let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(());
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

fn mock_hash(seed: u64, model: &str, role: GatewayRole, messages: &[ChatMessage]) -> u64 {
    let mut h = Fnv64::with_seed(seed);
    h.write_str(model);
    h.write_str(role.as_str());
    for m in messages {
        h.write_str(&m.role);
        h.write_str(&m.content);
    }
    h.finish()
}

fn extract_block(text: &str) -> Option<&str> {
    let start = text.find("<<<")? + 3;
    let end = text[start..].find(">>>")? + start;
    Some(text[start..end].trim())
}

/// Deterministic chat mock. Dispatches on the "[task:...]" marker the
/// pipeline puts in its system message and answers in the format the caller
/// expects; anything unrecognized gets a generic hash reply.
fn mock_chat(seed: u64, model: &str, role: GatewayRole, messages: &[ChatMessage]) -> String {
    let h = mock_hash(seed, model, role, messages);
    let system = messages.iter().find(|m| m.role == "system").map(|m| m.content.as_str()).unwrap_or("");
    let user = messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("");

    if system.contains("[task:tag]") {
        let n = 1 + (h % 3) as usize;
        let tags: Vec<String> =
            (0..n).map(|i| format!("tag-{:03}", (h >> (8 * (i + 1))) % 97)).collect();
        return tags.join("; ");
    }
    if system.contains("[task:group]") {
        let n = parse_after(user, "at most ").unwrap_or(26).max(1);
        let mut lines = Vec::new();
        for line in user.lines() {
            if let Some(label) = line.strip_prefix("- ") {
                let mut lh = Fnv64::with_seed(seed ^ 0x6772_7075);
                lh.write_str(label.trim());
                lines.push(format!("{} -> category-{:02}", label.trim(), lh.finish() % n as u64));
            }
        }
        return lines.join("\n");
    }
    if system.contains("[task:rewrite]") {
        let original = extract_block(user).unwrap_or(user);
        let lead = match h % 4 {
            0 => "Under the following additional constraints, ",
            1 => "Going one level deeper, ",
            2 => "With a concrete scenario in mind, ",
            _ => "Showing every reasoning step, ",
        };
        return format!("{lead}{original} (variant {:04x})", h & 0xffff);
    }
    if system.contains("[task:judge]") {
        return if h.is_multiple_of(16) {
            "unchanged".into()
        } else if h % 64 == 1 {
            "harmful".into()
        } else {
            "changed_and_safe".into()
        };
    }
    if system.contains("[task:referee]") {
        return format!("score: {}", 1 + h % 10);
    }
    if system.contains("[task:respond]") {
        let instruction = extract_block(user).unwrap_or(user);
        let head: String = instruction.chars().take(60).collect();
        return format!("Mock answer {:08x}: addressing '{head}'", h & 0xffff_ffff);
    }
    format!("mock-response-{h:016x}")
}

fn parse_after(text: &str, marker: &str) -> Option<usize> {
    let at = text.find(marker)? + marker.len();
    let digits: String = text[at..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

const EMBED_FEATURE_BUCKETS: usize = 8192;

/// Seeded sign-projection embedding of hashed n-grams. Pure function of
/// (text, dim, seed); unit norm; texts sharing tokens land closer.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::InvalidInput("cannot embed empty text".into()));
    }
    let cfg = FeaturizerConfig {
        ngram_orders: vec![1, 2],
        buckets: EMBED_FEATURE_BUCKETS,
        seed: seed ^ 0x656d_6265,
        prompt_only: true,
    };
    let mut fv = hash_ngram_features(text, &cfg);
    if fv.is_empty() {
        // Boundary-only text: hash the raw string as a single pseudo-token so
        // non-empty input always embeds.
        let mut h = Fnv64::with_seed(cfg.seed);
        h.write_str(text);
        fv = FeatureVector::from_counts(
            [((h.finish() % EMBED_FEATURE_BUCKETS as u64) as u32, 1)],
            EMBED_FEATURE_BUCKETS,
        );
    }
    let mut v = vec![0.0f32; dim];
    let blocks = dim.div_ceil(64);
    for (bucket, count) in fv.iter() {
        let c = count as f32;
        for block in 0..blocks {
            let mut h = Fnv64::with_seed(seed ^ 0x7072_6f6a);
            h.write_u64(u64::from(bucket));
            h.write_u64(block as u64);
            let bits = h.finish();
            let base = block * 64;
            for (off, slot) in v[base..(base + 64).min(dim)].iter_mut().enumerate() {
                if (bits >> off) & 1 == 1 {
                    *slot += c;
                } else {
                    *slot -= c;
                }
            }
        }
    }
    normalize(&mut v).map_err(|_| GatewayError::InvalidInput("degenerate embedding".into()))?;
    Ok(v)
}

fn mock_loss(seed: u64, record: &InstructionRecord, phase: LossPhase) -> f64 {
    let mut h = Fnv64::with_seed(seed ^ 0x6c6f_7373);
    h.write_str(record.id.as_str());
    h.write_str(&record.full_text());
    let base = 0.5 + 7.5 * unit_f64(h.finish());
    match phase {
        LossPhase::Answer => base,
        LossPhase::PostTune => {
            let mut h2 = Fnv64::with_seed(seed ^ 0x7475_6e65);
            h2.write_str(record.id.as_str());
            base * (0.2 + 0.75 * unit_f64(h2.finish()))
        }
    }
}

fn mock_reward(seed: u64, record: &InstructionRecord) -> f64 {
    let mut h = Fnv64::with_seed(seed ^ 0x7265_7761);
    h.write_str(record.id.as_str());
    h.write_str(&record.full_text());
    10.0 * unit_f64(h.finish()) - 2.0
}

/// Sidecar score rows: precomputed scores keyed by record id. Sidecar values
/// always win over gateway calls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_tune_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct SidecarScores {
    rows: HashMap<String, SidecarRow>,
}

impl SidecarScores {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path)?;
        let mut rows = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SidecarRow = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Parse(format!("sidecar line {}: {e}", i + 1)))?;
            rows.insert(row.id.clone(), row);
        }
        Ok(SidecarScores { rows })
    }

    pub fn get(&self, id: &str) -> Option<&SidecarRow> {
        self.rows.get(id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreNeeds {
    pub answer_loss: bool,
    pub post_tune_loss: bool,
    pub reward: bool,
}

impl ScoreNeeds {
    pub fn losses() -> Self {
        ScoreNeeds { answer_loss: true, post_tune_loss: true, reward: false }
    }

    pub fn all() -> Self {
        ScoreNeeds { answer_loss: true, post_tune_loss: true, reward: true }
    }
}

/// Fills missing scores on records. Precedence per field: sidecar value,
/// then a value already on the record, then a gateway scorer call.
pub fn ensure_scores(
    records: &mut [InstructionRecord],
    gateway: &Gateway,
    sidecar: Option<&SidecarScores>,
    needs: ScoreNeeds,
) -> Result<(), GatewayError> {
    use rayon::prelude::*;
    records.par_iter_mut().try_for_each(|record| {
        let side = sidecar.and_then(|s| s.get(&record.id)).cloned();
        if needs.answer_loss {
            let side_v = side.as_ref().and_then(|r| r.answer_loss);
            if let Some(v) = side_v {
                record.scores_mut().answer_loss = Some(v);
            } else if record.scores.as_ref().and_then(|s| s.answer_loss).is_none() {
                let v = gateway.score_answer_loss(record, LossPhase::Answer)?;
                record.scores_mut().answer_loss = Some(v);
            }
        }
        if needs.post_tune_loss {
            let side_v = side.as_ref().and_then(|r| r.post_tune_loss);
            if let Some(v) = side_v {
                record.scores_mut().post_tune_loss = Some(v);
            } else if record.scores.as_ref().and_then(|s| s.post_tune_loss).is_none() {
                let v = gateway.score_answer_loss(record, LossPhase::PostTune)?;
                record.scores_mut().post_tune_loss = Some(v);
            }
        }
        if needs.reward {
            let side_v = side.as_ref().and_then(|r| r.reward);
            if let Some(v) = side_v {
                record.scores_mut().reward = Some(v);
            } else if record.scores.as_ref().and_then(|s| s.reward).is_none() {
                let v = gateway.score_reward(record)?;
                record.scores_mut().reward = Some(v);
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Role, Turn};

    fn sample_record(id: &str) -> InstructionRecord {
        InstructionRecord::new(
            id,
            "unit",
            Domain::Chat,
            vec![Turn::new(Role::Human, "what is two plus two"), Turn::new(Role::Assistant, "four")],
        )
    }

    fn tag_messages(text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system("[task:tag] You assign capability tags."), ChatMessage::user(text.to_string())]
    }

    #[test]
    fn test_mock_is_pure_function_of_request() {
        let gw = Gateway::mock(7);
        let a = gw.complete_chat(&tag_messages("Instruction: sort a list"), GatewayRole::Tagger).unwrap();
        let b = gw.complete_chat(&tag_messages("Instruction: sort a list"), GatewayRole::Tagger).unwrap();
        assert_eq!(a, b);
        let c = gw.complete_chat(&tag_messages("Instruction: bake bread"), GatewayRole::Tagger).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_mock_seed_changes_responses() {
        let a = Gateway::mock(1)
            .complete_chat(&tag_messages("x"), GatewayRole::Tagger)
            .unwrap();
        let b = Gateway::mock(2)
            .complete_chat(&tag_messages("x"), GatewayRole::Tagger)
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn test_model_override_changes_mock_answer() {
        let gw = Gateway::mock(0);
        let msgs = vec![ChatMessage::system("[task:respond]"), ChatMessage::user("hello")];
        let a = gw.complete_chat_as(&msgs, GatewayRole::Responder, Some("model-a")).unwrap();
        let b = gw.complete_chat_as(&msgs, GatewayRole::Responder, Some("model-b")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn test_budget_exhaustion_on_fourth_call() {
        let gw = Gateway::mock(0).with_budget(3);
        let msgs = tag_messages("x");
        for _ in 0..3 {
            gw.complete_chat(&msgs, GatewayRole::Tagger).unwrap();
        }
        let err = gw.complete_chat(&msgs, GatewayRole::Tagger).unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExhausted), "{err}");
        assert_eq!(gw.calls_used(), 3);
    }

    #[test]
    fn test_mock_embeddings_unit_norm_and_cosine_meaningful() {
        let gw = Gateway::mock(3);
        let texts = vec![
            "the quick brown fox jumps over the lazy dog".to_string(),
            "the quick brown fox jumps over the lazy cat".to_string(),
            "completely unrelated quantum flux capacitor harmonics".to_string(),
        ];
        let vecs = gw.embed_texts(&texts).unwrap();
        for v in &vecs {
            let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let near = crate::featurizer::cosine_dense(&vecs[0], &vecs[1]).unwrap();
        let far = crate::featurizer::cosine_dense(&vecs[0], &vecs[2]).unwrap();
        assert!(near > far, "near {near} vs far {far}");
        assert!(near > 0.7, "near-duplicates should stay close: {near}");
    }

    #[test]
    fn test_embed_identical_text_identical_vector() {
        let gw = Gateway::mock(3);
        let v = gw.embed_texts(&["same text".into(), "same text".into()]).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn test_embed_empty_text_errors() {
        let gw = Gateway::mock(3);
        let err = gw.embed_texts(&["   ".into()]).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidInput(_)));
    }

    #[test]
    fn test_replay_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("calls.jsonl");
        let cfg = GatewayConfig {
            replay_log: Some(log.to_string_lossy().into_owned()),
            ..Default::default()
        };
        let live_answers;
        {
            let gw = Gateway::from_config(&cfg).unwrap();
            let a = gw.complete_chat(&tag_messages("repeat me"), GatewayRole::Tagger).unwrap();
            let e = gw.embed_texts(&["embed me".into()]).unwrap();
            let l = gw.score_answer_loss(&sample_record("r1"), LossPhase::Answer).unwrap();
            live_answers = (a, e, l);
        }
        let replay_cfg = GatewayConfig { mode: GatewayMode::Replay, ..cfg };
        let gw = Gateway::from_config(&replay_cfg).unwrap();
        let a = gw.complete_chat(&tag_messages("repeat me"), GatewayRole::Tagger).unwrap();
        assert_eq!(a, live_answers.0);
        let e = gw.embed_texts(&["embed me".into()]).unwrap();
        assert_eq!(e, live_answers.1);
        let l = gw.score_answer_loss(&sample_record("r1"), LossPhase::Answer).unwrap();
        assert_eq!(l, live_answers.2);
        let miss = gw.complete_chat(&tag_messages("never recorded"), GatewayRole::Tagger);
        assert!(matches!(miss, Err(GatewayError::ReplayMiss { .. })));
    }

    #[test]
    fn test_scripted_backend_fifo_and_exhaustion() {
        let script = Script::new();
        script.push_chat(GatewayRole::Judge, "changed_and_safe");
        script.push_chat(GatewayRole::Judge, "harmful");
        let gw = Gateway::scripted(script);
        let msgs = vec![ChatMessage::user("verdict?")];
        assert_eq!(gw.complete_chat(&msgs, GatewayRole::Judge).unwrap(), "changed_and_safe");
        assert_eq!(gw.complete_chat(&msgs, GatewayRole::Judge).unwrap(), "harmful");
        assert!(matches!(
            gw.complete_chat(&msgs, GatewayRole::Judge),
            Err(GatewayError::ScriptExhausted(_))
        ));
    }

    #[test]
    fn test_sidecar_precedence_over_gateway() {
        let dir = tempfile::tempdir().unwrap();
        let side_path = dir.path().join("scores.jsonl");
        std::fs::write(
            &side_path,
            "{\"id\":\"r1\",\"answer_loss\":9.5,\"post_tune_loss\":1.5,\"reward\":3.25}\n",
        )
        .unwrap();
        let sidecar = SidecarScores::load(&side_path).unwrap();
        let gw = Gateway::mock(0);
        let mut records = vec![sample_record("r1"), sample_record("r2")];
        ensure_scores(&mut records, &gw, Some(&sidecar), ScoreNeeds::all()).unwrap();
        let s1 = records[0].scores.unwrap();
        assert_eq!(s1.answer_loss, Some(9.5));
        assert_eq!(s1.post_tune_loss, Some(1.5));
        assert_eq!(s1.reward, Some(3.25));
        let s2 = records[1].scores.unwrap();
        assert!(s2.answer_loss.is_some() && s2.reward.is_some());
        assert_ne!(s2.answer_loss, Some(9.5));
    }

    #[test]
    fn test_existing_record_scores_are_kept_without_calls() {
        let gw = Gateway::mock(0).with_budget(0);
        let mut records = vec![sample_record("r1")];
        records[0].scores = Some(crate::corpus::ScoreSet {
            answer_loss: Some(2.0),
            post_tune_loss: Some(1.0),
            reward: Some(0.5),
            log_importance_weight: None,
        });
        ensure_scores(&mut records, &gw, None, ScoreNeeds::all()).unwrap();
        assert_eq!(gw.calls_used(), 0);
    }

    #[test]
    fn test_inflight_gate_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let gate = Arc::new(InflightGate::new(3));
        let peak = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..16 {
            let gate = gate.clone();
            let peak = peak.clone();
            let active = active.clone();
            handles.push(std::thread::spawn(move || {
                let _g = gate.acquire();
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(std::time::Duration::from_millis(5));
                active.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 3, "peak = {}", peak.load(Ordering::SeqCst));
    }

    #[test]
    fn test_mock_judge_and_referee_formats() {
        let gw = Gateway::mock(11);
        let judge = gw
            .complete_chat(
                &[ChatMessage::system("[task:judge]"), ChatMessage::user("a vs b")],
                GatewayRole::Judge,
            )
            .unwrap();
        assert!(["changed_and_safe", "unchanged", "harmful"].contains(&judge.as_str()));
        let referee = gw
            .complete_chat(
                &[ChatMessage::system("[task:referee]"), ChatMessage::user("rate this")],
                GatewayRole::Referee,
            )
            .unwrap();
        let score: u32 = referee.strip_prefix("score: ").unwrap().parse().unwrap();
        assert!((1..=10).contains(&score));
    }

    #[test]
    fn test_mock_rewrite_differs_from_original() {
        let gw = Gateway::mock(5);
        let original = "Sort an array of integers in place.";
        let msgs = vec![
            ChatMessage::system("[task:rewrite]"),
            ChatMessage::user(format!("Rewrite it.\n<<<\n{original}\n>>>\nOnly output the rewrite.")),
        ];
        let out = gw.complete_chat(&msgs, GatewayRole::Rewriter).unwrap();
        assert_ne!(out.trim(), original);
        assert!(out.contains(original), "rewrite should build on the original: {out}");
    }

    #[test]
    fn test_mock_grouping_respects_category_budget() {
        let gw = Gateway::mock(5);
        let labels = ["algebra", "geometry", "sorting", "parsing", "poetry"];
        let list: String = labels.iter().map(|l| format!("- {l}\n")).collect();
        let msgs = vec![
            ChatMessage::system("[task:group]"),
            ChatMessage::user(format!("Group these into at most 3 categories.\n{list}")),
        ];
        let out = gw.complete_chat(&msgs, GatewayRole::Tagger).unwrap();
        let mut cats = std::collections::BTreeSet::new();
        for line in out.lines() {
            let (label, cat) = line.split_once(" -> ").unwrap();
            assert!(labels.contains(&label));
            cats.insert(cat.to_string());
        }
        assert!(!cats.is_empty() && cats.len() <= 3, "{cats:?}");
        assert_eq!(out.lines().count(), labels.len());
    }
}
