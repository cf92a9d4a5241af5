//! Uniform chat/embedding client with per-role token accounting.
//!
//! Every call carries exactly one [`ModelRole`]; usage is tallied into a
//! shared [`UsageLedger`] under the client's active [`Phase`]. Retries cover
//! transport errors, 5xx and 429 only. Embeddings go through an optional
//! cache keyed by `(model, text)`; hits record zero usage.

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod cache;
mod mock;
mod openai;

pub use cache::EmbeddingCache;
pub use mock::{count_tokens, hash_embedding, FnBackend, MockEmbedder, ScriptError, ScriptedBackend};
pub use openai::OpenAiBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Embed,
    Base,
    Reflection,
    Judge,
}

impl ModelRole {
    pub const ALL: [ModelRole; 4] = [
        ModelRole::Embed,
        ModelRole::Base,
        ModelRole::Reflection,
        ModelRole::Judge,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Embed => "embed",
            ModelRole::Base => "base",
            ModelRole::Reflection => "reflection",
            ModelRole::Judge => "judge",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Train, Phase::Inference];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Inference => "inference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub role: ModelRole,
    pub temperature: f64,
    pub max_output: u32,
}

impl ChatRequest {
    /// Temperature 0 and a 1024-token output cap.
    pub fn new(role: ModelRole, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            role,
            temperature: 0.0,
            max_output: 1024,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.system.trim().is_empty() && self.user.trim().is_empty() {
            return Err(ModelError::InvalidRequest("system and user are both empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ModelError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_output == 0 {
            return Err(ModelError::InvalidRequest("max_output must be positive".into()));
        }
        if self.role == ModelRole::Embed {
            return Err(ModelError::InvalidRequest("embed role cannot chat".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub role: ModelRole,
}

/// What a backend returns for one chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: TokenCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Vec<Vec<f64>>,
    pub input_tokens: u64,
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no scripted response for {0}")]
    NoScript(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A chat + embedding provider. Implementations must be safe to share.
pub trait Backend: Send + Sync {
    fn chat(&self, model: &str, request: &ChatRequest) -> Result<Completion, BackendError>;
    fn embed(&self, model: &str, texts: &[String]) -> Result<EmbeddingBatch, BackendError>;
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{role} call failed after {attempts} attempt(s): {source}")]
    Call {
        role: ModelRole,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("{role} model returned an empty completion")]
    EmptyCompletion { role: ModelRole },
    #[error("embedding dimension drift: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no backend configured for role {0}")]
    NoRoute(ModelRole),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ModelError {
    pub fn attempts(&self) -> Option<u32> {
        match self {
            ModelError::Call { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

/// One prompt/completion pair kept as a run artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub role: ModelRole,
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenCount>,
}

impl ModelClient {
    /// Like [`ModelClient::chat`], also returning the exchange for transcripts.
    pub fn chat_logged(&self, request: &ChatRequest) -> (Result<ChatOutcome, ModelError>, Exchange) {
        let result = self.chat(request);
        let mut exchange = Exchange {
            role: request.role,
            system: request.system.clone(),
            user: request.user.clone(),
            completion: None,
            error: None,
            usage: None,
        };
        match &result {
            Ok(out) => {
                exchange.completion = Some(out.text.clone());
                exchange.usage = Some(TokenCount {
                    input_tokens: out.usage.input_tokens,
                    output_tokens: out.usage.output_tokens,
                });
            }
            Err(err) => exchange.error = Some(err.to_string()),
        }
        (result, exchange)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub phase: Phase,
    pub role: ModelRole,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Shared per-phase, per-role token tally plus the per-call log it sums.
#[derive(Debug, Default)]
pub struct UsageLedger {
    totals: [[[AtomicU64; 2]; 4]; 2],
    calls: Mutex<Vec<UsageEntry>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, phase: Phase, usage: Usage) {
        self.calls.lock().unwrap().push(UsageEntry {
            phase,
            role: usage.role,
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
        });
        let cell = &self.totals[phase as usize][usage.role.index()];
        cell[0].fetch_add(usage.input_tokens, Ordering::SeqCst);
        cell[1].fetch_add(usage.output_tokens, Ordering::SeqCst);
    }

    pub fn entries(&self) -> Vec<UsageEntry> {
        self.calls.lock().unwrap().clone()
    }

    pub fn report(&self) -> UsageReport {
        usage_report(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRow {
    pub phase: Phase,
    pub role: ModelRole,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Phase × role table, always all eight rows in train-then-inference,
/// embed/base/reflection/judge order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    pub rows: Vec<UsageRow>,
}

impl UsageReport {
    pub fn get(&self, phase: Phase, role: ModelRole) -> TokenCount {
        self.rows
            .iter()
            .find(|r| r.phase == phase && r.role == role)
            .map(|r| TokenCount {
                input_tokens: r.input_tokens,
                output_tokens: r.output_tokens,
            })
            .unwrap_or_default()
    }

    pub fn total(&self) -> TokenCount {
        self.rows.iter().fold(TokenCount::default(), |acc, r| TokenCount {
            input_tokens: acc.input_tokens + r.input_tokens,
            output_tokens: acc.output_tokens + r.output_tokens,
        })
    }
}

impl fmt::Display for UsageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<11} {:>12} {:>12}", "phase", "role", "input", "output")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<10} {:<11} {:>12} {:>12}",
                row.phase.as_str(),
                row.role.as_str(),
                row.input_tokens,
                row.output_tokens
            )?;
        }
        Ok(())
    }
}

pub fn usage_report(ledger: &UsageLedger) -> UsageReport {
    let mut rows = Vec::with_capacity(8);
    for phase in Phase::ALL {
        for role in ModelRole::ALL {
            let cell = &ledger.totals[phase as usize][role.index()];
            rows.push(UsageRow {
                phase,
                role,
                input_tokens: cell[0].load(Ordering::SeqCst),
                output_tokens: cell[1].load(Ordering::SeqCst),
            });
        }
    }
    UsageReport { rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each further attempt.
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_backoff_ms: 0,
        }
    }

    fn backoff(&self, failed_attempts: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1 << (failed_attempts - 1).min(16)))
    }
}

/// Counting semaphore bounding in-flight backend requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct GatePass<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GatePass<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GatePass(self)
    }
}

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Clone)]
struct Route {
    backend: Arc<dyn Backend>,
    model: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatOutcome {
    pub text: String,
    pub usage: Usage,
    pub attempts: u32,
}

pub struct ModelClient {
    routes: [Option<Route>; 4],
    ledger: Arc<UsageLedger>,
    phase: AtomicU8,
    cache: Option<EmbeddingCache>,
    retry: RetryPolicy,
    concurrency: usize,
    gate: Gate,
    dimension: Mutex<Option<usize>>,
    embed_batch: usize,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelClient")
            .field("retry", &self.retry)
            .field("concurrency", &self.concurrency)
            .field("cached", &self.cache.is_some())
            .finish_non_exhaustive()
    }
}

impl Default for ModelClient {
    fn default() -> Self {
        Self::new()
    }
}

impl ModelClient {
    /// A client with no routes, default retries, concurrency 4, no cache.
    pub fn new() -> Self {
        Self {
            routes: [None, None, None, None],
            ledger: Arc::new(UsageLedger::new()),
            phase: AtomicU8::new(Phase::Train as u8),
            cache: None,
            retry: RetryPolicy::default(),
            concurrency: 4,
            gate: Gate::new(4),
            dimension: Mutex::new(None),
            embed_batch: 128,
        }
    }

    /// Routes every role to one backend, using `mock-<role>` model names.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        let mut client = Self::new();
        for role in ModelRole::ALL {
            client = client.with_route(role, backend.clone(), format!("mock-{role}"));
        }
        client
    }

    pub fn with_route(mut self, role: ModelRole, backend: Arc<dyn Backend>, model: impl Into<String>) -> Self {
        self.routes[role.index()] = Some(Route {
            backend,
            model: model.into(),
        });
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self.gate = Gate::new(self.concurrency);
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<UsageLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.store(phase as u8, Ordering::SeqCst);
    }

    pub fn phase(&self) -> Phase {
        if self.phase.load(Ordering::SeqCst) == Phase::Inference as u8 {
            Phase::Inference
        } else {
            Phase::Train
        }
    }

    fn route(&self, role: ModelRole) -> Result<&Route, ModelError> {
        self.routes[role.index()].as_ref().ok_or(ModelError::NoRoute(role))
    }

    fn with_retries<T>(
        &self,
        role: ModelRole,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<(T, u32), ModelError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = {
                let _pass = self.gate.enter();
                call()
            };
            match result {
                Ok(value) => return Ok((value, attempts)),
                Err(err) if err.is_retryable() && attempts < self.retry.max_attempts => {
                    tracing::debug!(%role, attempts, %err, "retrying model call");
                    std::thread::sleep(self.retry.backoff(attempts));
                }
                Err(source) => {
                    return Err(ModelError::Call {
                        role,
                        attempts,
                        source,
                    })
                }
            }
        }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatOutcome, ModelError> {
        request.validate()?;
        let route = self.route(request.role)?;
        let (completion, attempts) =
            self.with_retries(request.role, || route.backend.chat(&route.model, request))?;
        let usage = Usage {
            input_tokens: completion.tokens.input_tokens,
            output_tokens: completion.tokens.output_tokens,
            role: request.role,
        };
        self.ledger.record(self.phase(), usage);
        if completion.text.trim().is_empty() {
            return Err(ModelError::EmptyCompletion { role: request.role });
        }
        Ok(ChatOutcome {
            text: completion.text,
            usage,
            attempts,
        })
    }

    /// Embeds `texts`, one vector per text. Cached texts skip the backend.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
        if texts.is_empty() {
            return Err(ModelError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(ModelError::InvalidRequest(format!("text {i} is empty")));
        }
        let route = self.route(ModelRole::Embed)?;
        let Some(cache) = &self.cache else {
            return self.embed_uncached(route, texts);
        };

        let mut missing: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for text in texts {
            if cache.get(&route.model, text).is_none() && seen.insert(text.as_str()) {
                missing.push(text.clone());
            }
        }
        if !missing.is_empty() {
            let vectors = self.embed_uncached(route, &missing)?;
            for (text, vector) in missing.iter().zip(vectors) {
                cache.insert(&route.model, text, vector)?;
            }
        }
        texts
            .iter()
            .map(|t| {
                let v = cache
                    .get(&route.model, t)
                    .expect("embedding inserted above");
                self.check_dimension(v.len())?;
                Ok(v)
            })
            .collect()
    }

    fn embed_uncached(&self, route: &Route, texts: &[String]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.embed_batch) {
            let (batch, _) =
                self.with_retries(ModelRole::Embed, || route.backend.embed(&route.model, chunk))?;
            if batch.vectors.len() != chunk.len() {
                return Err(ModelError::Call {
                    role: ModelRole::Embed,
                    attempts: 1,
                    source: BackendError::Decode(format!(
                        "expected {} vectors, got {}",
                        chunk.len(),
                        batch.vectors.len()
                    )),
                });
            }
            self.ledger.record(
                self.phase(),
                Usage {
                    input_tokens: batch.input_tokens,
                    output_tokens: 0,
                    role: ModelRole::Embed,
                },
            );
            for v in &batch.vectors {
                self.check_dimension(v.len())?;
            }
            out.extend(batch.vectors);
        }
        Ok(out)
    }

    fn check_dimension(&self, got: usize) -> Result<(), ModelError> {
        let mut dim = self.dimension.lock().unwrap();
        match *dim {
            None if got == 0 => Err(ModelError::DimensionDrift { expected: 1, got }),
            None => {
                *dim = Some(got);
                Ok(())
            }
            Some(expected) if expected != got => Err(ModelError::DimensionDrift { expected, got }),
            Some(_) => Ok(()),
        }
    }

    /// Applies `f` to every item using at most `concurrency` worker threads.
    /// Results come back in input order.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        let workers = self.concurrency.min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let value = f(&items[i]);
                    *slots[i].lock().unwrap() = Some(value);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}
