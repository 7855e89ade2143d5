//! Access to the external models the annotation pipeline relies on, behind a
//! transport trait with a deterministic mock and an HTTP implementation.
//!
//! The client adds retries with exponential backoff, a response cache keyed
//! by each request's idempotency key (in memory, optionally mirrored on
//! disk), and bounded concurrency whose results come back in request order.

mod http;
mod mock;
pub mod templates;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpTransport, TOKEN_ENV};
pub use mock::{MockOutcome, MockProvider, MockRule, PLANTED_FLAW, PLANTED_REJECT};
pub use templates::render_template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Captioner,
    QaGenerator,
    CotGenerator,
    Verifier,
    Transcriber,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Captioner => "captioner",
            Role::QaGenerator => "qa_generator",
            Role::CotGenerator => "cot_generator",
            Role::Verifier => "verifier",
            Role::Transcriber => "transcriber",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("template error: {0}")]
    Template(String),
    #[error("provider unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("provider rejected request: {0}")]
    Rejected(String),
    #[error("verifier reply is not yes/no: {0:?}")]
    MalformedVerdict(String),
    #[error("provider cache: {0}")]
    Cache(String),
}

impl ProviderError {
    pub fn class_name(&self) -> &'static str {
        match self {
            ProviderError::Template(_) => "TemplateError",
            ProviderError::Unavailable { .. } => "ProviderUnavailable",
            ProviderError::Rejected(_) => "ProviderRejected",
            ProviderError::MalformedVerdict(_) => "MalformedVerdict",
            ProviderError::Cache(_) => "CacheError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub role: Role,
    pub template_id: String,
    pub variables: BTreeMap<String, String>,
    pub audio_ref: Option<String>,
}

impl ProviderRequest {
    pub fn new(role: Role, template_id: &str) -> Self {
        Self { role, template_id: template_id.to_owned(), variables: BTreeMap::new(), audio_ref: None }
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.variables.insert(name.to_owned(), value.into());
        self
    }

    pub fn audio(mut self, audio_ref: impl Into<String>) -> Self {
        self.audio_ref = Some(audio_ref.into());
        self
    }

    /// SHA-256 over the canonical JSON of role, template, variables and
    /// audio reference.
    pub fn idempotency_key(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        crate::metadata::shard::sha256_hex(&canonical)
    }

    pub fn render(&self) -> Result<String, ProviderError> {
        render_template(&self.template_id, &self.variables)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

/// `Yes`/`No` from the first word of a reply, ignoring case and punctuation.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let word: String = text
        .trim()
        .split_whitespace()
        .next()?
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(Verdict::Yes),
        "no" => Some(Verdict::No),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    pub verdict: Option<Verdict>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Worth retrying: connection failures, timeouts, 5xx, 429.
    Transient(String),
    /// Not worth retrying.
    Rejected(String),
}

pub trait Transport: Send + Sync {
    fn call(&self, request: &ProviderRequest, prompt: &str) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_secs(1), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry as i32))
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub transport_calls: usize,
}

pub struct ProviderClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    cache: Mutex<HashMap<String, ProviderResponse>>,
    cache_dir: Option<PathBuf>,
    max_in_flight: usize,
    hits: AtomicUsize,
    misses: AtomicUsize,
    calls: AtomicUsize,
}

impl ProviderClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport,
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            cache: Mutex::new(HashMap::new()),
            cache_dir: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    /// Mirror the cache in `dir`, one `<idempotency key>.json` per response.
    pub fn with_cache_dir(mut self, dir: &Path) -> Result<Self, ProviderError> {
        std::fs::create_dir_all(dir).map_err(|e| ProviderError::Cache(format!("{}: {e}", dir.display())))?;
        self.cache_dir = Some(dir.to_owned());
        Ok(self)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            transport_calls: self.calls.load(Ordering::SeqCst),
        }
    }

    fn cached(&self, key: &str) -> Option<ProviderResponse> {
        if let Some(r) = self.cache.lock().expect("cache lock").get(key) {
            return Some(r.clone());
        }
        let path = self.cache_dir.as_ref()?.join(format!("{key}.json"));
        let bytes = std::fs::read(path).ok()?;
        let response: ProviderResponse = serde_json::from_slice(&bytes).ok()?;
        self.cache.lock().expect("cache lock").insert(key.to_owned(), response.clone());
        Some(response)
    }

    fn store(&self, key: &str, response: &ProviderResponse) -> Result<(), ProviderError> {
        self.cache.lock().expect("cache lock").insert(key.to_owned(), response.clone());
        if let Some(dir) = &self.cache_dir {
            let path = dir.join(format!("{key}.json"));
            let bytes = serde_json::to_vec(response).expect("response serializes");
            std::fs::write(&path, bytes).map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn send(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let key = request.idempotency_key();
        if let Some(hit) = self.cached(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let prompt = request.render()?;
        let start = Instant::now();
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.call(request, &prompt) {
                Ok(text) => break text,
                Err(TransportError::Rejected(msg)) => return Err(ProviderError::Rejected(msg)),
                Err(TransportError::Transient(msg)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(ProviderError::Unavailable { attempts: attempt, last: msg });
                    }
                    log::debug!("{} attempt {attempt} failed: {msg}", request.role);
                    (self.sleeper)(self.retry.delay(attempt - 1));
                }
            }
        };
        let verdict = match request.role {
            Role::Verifier => Some(parse_verdict(&text).ok_or_else(|| ProviderError::MalformedVerdict(text.clone()))?),
            _ => None,
        };
        let response = ProviderResponse { text, verdict, latency_ms: start.elapsed().as_millis() as u64 };
        self.store(&key, &response)?;
        Ok(response)
    }

    /// Send every request with at most `max_in_flight` outstanding; results
    /// are in request order.
    pub fn send_all(&self, requests: &[ProviderRequest]) -> Vec<Result<ProviderResponse, ProviderError>> {
        bounded_map(requests, self.max_in_flight, |r| self.send(r))
    }
}

/// Apply `f` to every item on at most `workers` threads, keeping input order.
pub fn bounded_map<I, T, F>(items: &[I], workers: usize, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests;
