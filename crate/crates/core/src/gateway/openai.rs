use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::sync::Semaphore;

use super::rate_limit::{Clock, RateLimiter, SystemClock};
use super::{CompletionRequest, CompletionResponse, Gateway, GatewayError, Usage};

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g. `https://host/v1`.
    pub api_base: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// `(requests, window)` for the sliding-window limiter.
    pub rate_limit: Option<(usize, Duration)>,
    pub jitter_seed: u64,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            api_base: "https://api.openai.com/v1".into(),
            api_key: None,
            max_attempts: 5,
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(30),
            timeout: Duration::from_secs(120),
            max_in_flight: 8,
            rate_limit: None,
            jitter_seed: 0,
        }
    }
}

/// Client for any server speaking the `/chat/completions` protocol.
pub struct OpenAiGateway {
    client: reqwest::Client,
    config: OpenAiConfig,
    in_flight: Semaphore,
    limiter: Option<RateLimiter>,
    clock: Arc<dyn Clock>,
    jitter: Mutex<ChaCha8Rng>,
}

impl OpenAiGateway {
    pub fn new(config: OpenAiConfig) -> Result<Self, GatewayError> {
        Self::with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn with_clock(config: OpenAiConfig, clock: Arc<dyn Clock>) -> Result<Self, GatewayError> {
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_attempts and max_in_flight must be positive".into(),
            ));
        }
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let limiter = config
            .rate_limit
            .map(|(n, window)| RateLimiter::new(n, window, clock.clone()));
        Ok(Self {
            client,
            in_flight: Semaphore::new(config.max_in_flight),
            limiter,
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(config.jitter_seed)),
            clock,
            config,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    /// Exponential backoff with jitter drawn from the seeded generator:
    /// a uniform delay in `[d/2, d]` where `d = base * 2^retry`, capped.
    fn backoff(&self, retry: u32) -> Duration {
        let full = self
            .config
            .backoff_base
            .saturating_mul(2u32.saturating_pow(retry))
            .min(self.config.backoff_cap);
        let factor: f64 = self.jitter.lock().unwrap().gen_range(0.5..=1.0);
        full.mul_f64(factor)
    }

    async fn attempt(&self, req: &CompletionRequest) -> Result<CompletionResponse, Attempt> {
        let mut body = serde_json::json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        if let Some(max_tokens) = req.max_tokens {
            body["max_tokens"] = max_tokens.into();
        }
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| Attempt::plain(transport(e)))?;
        let status = response.status();
        if !status.is_success() {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64);
            let body = response.text().await.unwrap_or_default();
            return Err(Attempt {
                error: GatewayError::Status {
                    status: status.as_u16(),
                    body,
                },
                retry_after,
            });
        }
        let parsed: ChatResponse = response
            .json()
            .await
            .map_err(|e| Attempt::plain(GatewayError::InvalidResponse(e.to_string())))?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            Attempt::plain(GatewayError::InvalidResponse("response has no choices".into()))
        })?;
        Ok(CompletionResponse {
            content: choice.message.content.unwrap_or_default(),
            model: parsed.model.unwrap_or_else(|| req.model.clone()),
            usage: parsed.usage,
        })
    }
}

struct Attempt {
    error: GatewayError,
    retry_after: Option<Duration>,
}

impl Attempt {
    fn plain(error: GatewayError) -> Self {
        Self {
            error,
            retry_after: None,
        }
    }
}

fn transport(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    model: Option<String>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[async_trait]
impl Gateway for OpenAiGateway {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let mut retry = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire().await;
            }
            let failure = match self.attempt(req).await {
                Ok(response) => return Ok(response),
                Err(failure) => failure,
            };
            let attempts = retry + 1;
            if !failure.error.is_retryable() {
                return Err(failure.error);
            }
            if attempts >= self.config.max_attempts {
                return Err(GatewayError::RetriesExhausted {
                    attempts,
                    last: Box::new(failure.error),
                });
            }
            let delay = failure.retry_after.unwrap_or_else(|| self.backoff(retry));
            tracing::warn!(
                scope = %req.scope,
                tag = %req.tag,
                attempt = attempts,
                delay_ms = delay.as_millis() as u64,
                "retrying completion: {}",
                failure.error
            );
            self.clock.sleep(delay).await;
            retry += 1;
        }
    }
}
