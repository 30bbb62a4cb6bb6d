//! Text-generation backends.
//!
//! [`HttpBackend`] talks to any server exposing an OpenAI-style
//! `POST {base}/chat/completions` endpoint. [`MockBackend`] answers from a
//! fixture table and never touches the network.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "SCISENT_API_KEY";
pub const API_BASE_ENV: &str = "SCISENT_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

/// Smallest top_p substituted when `clamp_top_p_min` is on.
pub const TOP_P_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("server error {status} after {attempts} attempts")]
    Server { status: u16, attempts: u32 },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("authentication failed with status {0}")]
    Auth(u16),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no fixture for key {0:?}")]
    MissingFixture(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::Network(_) | BackendError::RateLimited { .. } | BackendError::Server { .. }
        )
    }
}

/// Exponential backoff without jitter: `base * factor^n`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    #[serde(with = "millis")]
    pub initial: Duration,
    pub factor: f64,
    #[serde(with = "millis")]
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial: Duration::from_millis(500),
            factor: 2.0,
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let scaled = self.initial.as_secs_f64() * self.factor.powi(retry as i32);
        Duration::from_secs_f64(scaled.min(self.max.as_secs_f64()))
    }

    pub fn schedule(&self, max_retries: u32) -> Vec<Duration> {
        (0..max_retries).map(|r| self.delay(r)).collect()
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    #[serde(rename = "timeout_ms", with = "millis")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Backoff,
    /// Send `TOP_P_FLOOR` instead of a configured top_p of 0.
    pub clamp_top_p_min: bool,
    /// Include `top_k` in the payload. Plain chat-completion servers do not
    /// accept it, so it is off by default.
    pub send_top_k: bool,
    /// Upper bound on in-flight requests.
    pub concurrency: usize,
}

impl Default for BackendConfig {
    /// Greedy decoding: temperature 0, top_p 0, top_k 1.
    fn default() -> Self {
        BackendConfig {
            endpoint_url: DEFAULT_API_BASE.to_string(),
            model_id: "gpt-4".to_string(),
            temperature: 0.0,
            top_p: 0.0,
            top_k: Some(1),
            max_tokens: 64,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Backoff::default(),
            clamp_top_p_min: false,
            send_top_k: false,
            concurrency: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return bad("top_p must lie in [0, 1]");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive");
        }
        Ok(())
    }

    /// top_p as it goes on the wire.
    pub fn effective_top_p(&self) -> f64 {
        if self.clamp_top_p_min && self.top_p < TOP_P_FLOOR {
            TOP_P_FLOOR
        } else {
            self.top_p
        }
    }

    /// Differences between the configured decoding parameters and the
    /// payload actually sent. Recorded in run manifests.
    pub fn wire_adjustments(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.effective_top_p() != self.top_p {
            notes.push(format!(
                "top_p {} sent as {}",
                self.top_p,
                self.effective_top_p()
            ));
        }
        if let (Some(k), false) = (self.top_k, self.send_top_k) {
            notes.push(format!("top_k {k} omitted from payload"));
        }
        notes
    }

    pub fn fingerprint(&self, prompt: &str) -> String {
        request_fingerprint(
            &self.model_id,
            prompt,
            self.temperature,
            self.top_p,
            self.top_k,
            self.max_tokens,
        )
    }

    /// Request body for `/chat/completions`.
    pub fn payload(&self, prompt: &str) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "top_p": self.effective_top_p(),
            "max_tokens": self.max_tokens,
        });
        if let (Some(k), true) = (self.top_k, self.send_top_k) {
            body["top_k"] = serde_json::json!(k);
        }
        body
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint_url.trim_end_matches('/'))
    }
}

/// SHA-256 over the model, prompt and decoding parameters.
pub fn request_fingerprint(
    model_id: &str,
    prompt: &str,
    temperature: f64,
    top_p: f64,
    top_k: Option<u32>,
    max_tokens: u32,
) -> String {
    let canonical = serde_json::json!([model_id, prompt, temperature, top_p, top_k, max_tokens]);
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Caller-side identity of the request, e.g. a sentence id. Used by
    /// [`MockBackend`] lookups; ignored by network backends.
    pub key: Option<String>,
    /// 0-based attempt counter for repeated requests on the same key.
    pub attempt: u32,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            key: None,
            attempt: 0,
        }
    }

    pub fn keyed(prompt: impl Into<String>, key: impl Into<String>, attempt: u32) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            key: Some(key.into()),
            attempt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub model_id: String,
    pub request_fingerprint: String,
    pub latency: Duration,
}

pub trait Backend: Send + Sync {
    fn config(&self) -> &BackendConfig;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    fn model_id(&self) -> &str {
        &self.config().model_id
    }

    fn fingerprint(&self, prompt: &str) -> String {
        self.config().fingerprint(prompt)
    }
}

/// Pauses between retries. Swapped for a recording fake in tests.
pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Runs `op` until it succeeds, fails permanently or `max_retries` retries
/// are spent. `op` receives the 0-based attempt number.
pub fn with_retries<T>(
    max_retries: u32,
    backoff: &Backoff,
    sleeper: &dyn Sleeper,
    mut op: impl FnMut(u32) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < max_retries => {
                log::debug!("attempt {attempt} failed ({e}); retrying");
                sleeper.sleep(backoff.delay(attempt));
                attempt += 1;
            }
            Err(e) => {
                return Err(match e {
                    BackendError::RateLimited { .. } => BackendError::RateLimited {
                        attempts: attempt + 1,
                    },
                    BackendError::Server { status, .. } => BackendError::Server {
                        status,
                        attempts: attempt + 1,
                    },
                    other => other,
                })
            }
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// Extracts `choices[0].message.content` from a response body.
pub fn parse_completion(body: &str) -> Result<String, BackendError> {
    let parsed: ChatResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("unexpected response body: {e}")))?;
    let first = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    first
        .message
        .content
        .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))
}

/// Blocking chat-completion client.
pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    sleeper: Arc<dyn Sleeper>,
    requests: AtomicUsize,
}

impl HttpBackend {
    pub fn new(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            config,
            api_key,
            agent,
            sleeper: Arc::new(ThreadSleeper),
            requests: AtomicUsize::new(0),
        })
    }

    /// Reads the key from `SCISENT_API_KEY` and, when set, the base URL from
    /// `SCISENT_API_BASE`.
    pub fn from_env(mut config: BackendConfig) -> Result<Self, BackendError> {
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            if !base.is_empty() {
                config.endpoint_url = base;
            }
        }
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        HttpBackend::new(config, key)
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.config.completions_url());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        match status {
            200..=299 => parse_completion(&text),
            401 | 403 => Err(BackendError::Auth(status)),
            429 => Err(BackendError::RateLimited { attempts: 1 }),
            500..=599 => Err(BackendError::Server {
                status,
                attempts: 1,
            }),
            _ => Err(BackendError::Rejected { status, body: text }),
        }
    }
}

impl Backend for HttpBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        if request.prompt.is_empty() {
            return Err(BackendError::InvalidConfig("empty prompt".into()));
        }
        let body = self.config.payload(&request.prompt);
        let started = Instant::now();
        let text = with_retries(
            self.config.max_retries,
            &self.config.backoff,
            self.sleeper.as_ref(),
            |_| self.send_once(&body),
        )?;
        Ok(GenerationResult {
            text,
            model_id: self.config.model_id.clone(),
            request_fingerprint: self.config.fingerprint(&request.prompt),
            latency: started.elapsed(),
        })
    }
}

/// A fixture entry: one fixed response, or a sequence indexed by attempt
/// (the last entry repeats once the sequence runs out).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Fixed(String),
    Sequence(Vec<String>),
}

impl MockResponse {
    fn at(&self, attempt: u32) -> Option<&str> {
        match self {
            MockResponse::Fixed(s) => Some(s),
            MockResponse::Sequence(v) => v
                .get(attempt as usize)
                .or_else(|| v.last())
                .map(String::as_str),
        }
    }
}

/// On-disk fixture file. Either a structured object or a flat map of
/// key to response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixtures {
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub default: Option<String>,
    pub responses: HashMap<String, MockResponse>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FixtureFile {
    Structured(MockFixtures),
    Flat(HashMap<String, MockResponse>),
}

impl MockFixtures {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(match serde_json::from_str::<FixtureFile>(text)? {
            FixtureFile::Structured(f) => f,
            FixtureFile::Flat(responses) => MockFixtures {
                strict: false,
                default: None,
                responses,
            },
        })
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Table-driven backend. Lookup order: the request key, then the request
/// fingerprint; a miss yields the default response, or `MissingFixture`
/// in strict mode.
pub struct MockBackend {
    config: BackendConfig,
    fixtures: MockFixtures,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(config: BackendConfig, fixtures: MockFixtures) -> Self {
        MockBackend {
            config,
            fixtures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_table(table: HashMap<String, MockResponse>) -> Self {
        MockBackend::new(
            BackendConfig {
                model_id: "mock".into(),
                ..BackendConfig::default()
            },
            MockFixtures {
                strict: true,
                default: None,
                responses: table,
            },
        )
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.fixtures.strict = strict;
        self
    }

    pub fn with_default(mut self, default: impl Into<String>) -> Self {
        self.fixtures.default = Some(default.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fingerprint = self.config.fingerprint(&request.prompt);
        let hit = request
            .key
            .as_ref()
            .and_then(|k| self.fixtures.responses.get(k))
            .or_else(|| self.fixtures.responses.get(&fingerprint))
            .and_then(|r| r.at(request.attempt));
        let text = match (hit, &self.fixtures.default) {
            (Some(t), _) => t.to_string(),
            (None, Some(d)) if !self.fixtures.strict => d.clone(),
            (None, None) if !self.fixtures.strict => String::new(),
            _ => {
                return Err(BackendError::MissingFixture(
                    request.key.clone().unwrap_or(fingerprint),
                ))
            }
        };
        Ok(GenerationResult {
            text,
            model_id: self.config.model_id.clone(),
            request_fingerprint: fingerprint,
            latency: Duration::ZERO,
        })
    }
}
