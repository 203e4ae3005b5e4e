//! Chat-completion gateway shared by every agent.
//!
//! All model traffic goes through [`Gateway`]. Backends: a live
//! OpenAI-compatible client, a content-addressed cache wrapper, and a replay
//! backend that serves scripted replies for offline runs.

mod cache;
mod openai;
mod rate_limit;
mod replay;

pub use cache::{cache_key, CachedGateway};
pub use openai::{OpenAiConfig, OpenAiGateway};
pub use rate_limit::{Clock, RateLimiter, SystemClock, VirtualClock};
pub use replay::{RecordingGateway, ReplayEntry, ReplayGateway, ReplayScript};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Call tags name the role a request plays; the replay backend checks them.
pub mod tags {
    pub const AUGMENTATION: &str = "augmentation";
    pub const REVIEW_ASSUMPTION: &str = "review_assumption";
    pub const REVIEW_DERIVATION: &str = "review_derivation";
    pub const REVIEW_HOLISTIC: &str = "review_holistic";
    pub const SUMMARIZATION: &str = "summarization";
    pub const JUDGE: &str = "judge";
    pub const GENERATE: &str = "generate";
    pub const REFINE: &str = "refine";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Sampling seed, set when several independent samples share a prompt.
    pub seed: Option<u64>,
    /// Role of the call, one of [`tags`].
    pub tag: String,
    /// Pair the call belongs to; replay queues are kept per scope.
    pub scope: String,
}

impl CompletionRequest {
    pub fn new(
        scope: impl Into<String>,
        tag: &str,
        model: impl Into<String>,
        prompt: impl Into<String>,
        temperature: f64,
    ) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature,
            max_tokens: None,
            seed: None,
            tag: tag.to_string(),
            scope: scope.into(),
        }
    }

    /// Text of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

impl CompletionResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            model: String::new(),
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("replay diverged in scope `{scope}`: script expects a `{expected}` call, got `{actual}`")]
    ReplayDivergence {
        scope: String,
        expected: String,
        actual: String,
    },
    #[error("replay script for scope `{scope}` has no reply left for a `{tag}` call")]
    ReplayExhausted { scope: String, tag: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("gateway misconfigured: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::Timeout => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait Gateway: Send + Sync {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

#[async_trait]
impl<G: Gateway + ?Sized> Gateway for Arc<G> {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (**self).complete(req).await
    }
}

#[async_trait]
impl<G: Gateway + ?Sized> Gateway for &G {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (**self).complete(req).await
    }
}

/// Gateway backed by a closure, handy for scripted tests.
pub struct FnGateway<F>(pub F);

#[async_trait]
impl<F> Gateway for FnGateway<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (self.0)(req).map(CompletionResponse::text)
    }
}

/// Counts calls per scope and per tag before delegating.
pub struct CallCounter<G> {
    inner: G,
    total: AtomicUsize,
    by_scope: Mutex<BTreeMap<String, usize>>,
    by_tag: Mutex<BTreeMap<String, usize>>,
}

impl<G> CallCounter<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            total: AtomicUsize::new(0),
            by_scope: Mutex::new(BTreeMap::new()),
            by_tag: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    pub fn for_scope(&self, scope: &str) -> usize {
        self.by_scope.lock().unwrap().get(scope).copied().unwrap_or(0)
    }

    pub fn for_tag(&self, tag: &str) -> usize {
        self.by_tag.lock().unwrap().get(tag).copied().unwrap_or(0)
    }

    pub fn scopes(&self) -> BTreeMap<String, usize> {
        self.by_scope.lock().unwrap().clone()
    }
}

#[async_trait]
impl<G: Gateway> Gateway for CallCounter<G> {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.total.fetch_add(1, Ordering::SeqCst);
        *self
            .by_scope
            .lock()
            .unwrap()
            .entry(req.scope.clone())
            .or_default() += 1;
        *self.by_tag.lock().unwrap().entry(req.tag.clone()).or_default() += 1;
        self.inner.complete(req).await
    }
}
