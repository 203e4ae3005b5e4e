//! TOML run configuration. Every section is optional; environment variables
//! override the endpoint, key and model.

use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use loca_core::agents::AgentConfig;
use loca_core::baselines::{BaselineKind, BaselineSpec};
use loca_core::consistency::ConsistencyConfig;
use loca_core::gateway::{CachedGateway, Gateway, OpenAiConfig, OpenAiGateway, ReplayGateway, ReplayScript};
use loca_core::partition::{PipelineConfig, RunOptions};
use loca_core::review_loop::LoopConfig;

pub const ENV_API_BASE: &str = "LOCA_API_BASE";
pub const ENV_API_KEY: &str = "LOCA_API_KEY";
pub const ENV_MODEL: &str = "LOCA_MODEL";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Openai,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: Backend,
    pub api_base: Option<String>,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Requests allowed per `rate_limit_window_secs`; unlimited when unset.
    pub rate_limit_requests: Option<usize>,
    pub rate_limit_window_secs: u64,
    pub cache_dir: Option<PathBuf>,
    pub replay_script: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let d = OpenAiConfig::default();
        Self {
            backend: Backend::default(),
            api_base: None,
            api_key: None,
            max_attempts: d.max_attempts,
            backoff_base_ms: d.backoff_base.as_millis() as u64,
            backoff_cap_ms: d.backoff_cap.as_millis() as u64,
            timeout_secs: d.timeout.as_secs(),
            max_in_flight: d.max_in_flight,
            rate_limit_requests: None,
            rate_limit_window_secs: 60,
            cache_dir: None,
            replay_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub workers: usize,
    pub max_pairs: Option<usize>,
    pub fixed_timestamp: Option<String>,
    pub write_artifacts: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = RunOptions::default();
        Self {
            workers: d.workers,
            max_pairs: d.max_pairs,
            fixed_timestamp: d.fixed_timestamp,
            write_artifacts: PipelineConfig::default().write_artifacts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub samples_k: u32,
    pub n_consecutive: u32,
    pub max_rounds: u32,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineSpec::new(BaselineKind::Direct);
        Self {
            samples_k: d.samples_k,
            n_consecutive: d.n_consecutive,
            max_rounds: d.max_rounds,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gateway: GatewaySection,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub agents: AgentConfig,
    pub consistency: ConsistencyConfig,
    pub pipeline: PipelineSection,
    pub baseline: BaselineSection,
}

impl Config {
    /// Parses `text`; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        for path in [&mut cfg.gateway.cache_dir, &mut cfg.gateway.replay_script].into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(base) = var(ENV_API_BASE) {
            self.gateway.api_base = Some(base);
        }
        if let Some(key) = var(ENV_API_KEY) {
            self.gateway.api_key = Some(key);
        }
        if let Some(model) = var(ENV_MODEL) {
            self.agents.model = model;
        }
    }

    /// Seeds symbolic sampling and retry jitter.
    pub fn apply_seed(&mut self, seed: u64) {
        self.consistency.seed = seed;
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            loop_cfg: self.loop_cfg.clone(),
            agents: self.agents.clone(),
            consistency: self.consistency.clone(),
            run: RunOptions {
                workers: self.pipeline.workers,
                resume: false,
                max_pairs: self.pipeline.max_pairs,
                fixed_timestamp: self.pipeline.fixed_timestamp.clone(),
            },
            write_artifacts: self.pipeline.write_artifacts,
        }
    }

    pub fn baseline_spec(&self, kind: BaselineKind) -> BaselineSpec {
        BaselineSpec {
            kind,
            samples_k: self.baseline.samples_k,
            n_consecutive: self.baseline.n_consecutive,
            max_rounds: self.baseline.max_rounds,
        }
    }

    pub fn openai_config(&self) -> OpenAiConfig {
        let g = &self.gateway;
        let mut cfg = OpenAiConfig {
            api_key: g.api_key.clone(),
            max_attempts: g.max_attempts,
            backoff_base: Duration::from_millis(g.backoff_base_ms),
            backoff_cap: Duration::from_millis(g.backoff_cap_ms),
            timeout: Duration::from_secs(g.timeout_secs),
            max_in_flight: g.max_in_flight,
            rate_limit: g
                .rate_limit_requests
                .map(|n| (n, Duration::from_secs(g.rate_limit_window_secs))),
            jitter_seed: self.consistency.seed,
            ..OpenAiConfig::default()
        };
        if let Some(base) = &g.api_base {
            cfg.api_base = base.clone();
        }
        cfg
    }

    /// The configured backend, without the response cache.
    pub fn backend(&self) -> anyhow::Result<Arc<dyn Gateway>> {
        Ok(match self.gateway.backend {
            Backend::Openai => Arc::new(OpenAiGateway::new(self.openai_config())?),
            Backend::Replay => {
                let path = self
                    .gateway
                    .replay_script
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("the replay backend needs gateway.replay_script"))?;
                Arc::new(ReplayGateway::new(ReplayScript::load(path)?))
            }
        })
    }

    pub fn with_cache(&self, inner: Arc<dyn Gateway>) -> anyhow::Result<Arc<dyn Gateway>> {
        Ok(match &self.gateway.cache_dir {
            Some(dir) => Arc::new(CachedGateway::new(inner, dir)?),
            None => inner,
        })
    }
}
