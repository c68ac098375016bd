use std::path::{Path, PathBuf};
use std::time::Duration;

use finrag_core::encoder::DEFAULT_SEED;
use finrag_core::generation::{DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use finrag_core::{GateConfig, PipelineSettings, PromptConfig};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_BODY_LIMIT: usize = 1 << 20;
pub const DEFAULT_MAX_CONCURRENT_GENERATIONS: usize = 4;
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

/// Where web search results come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum WebMode {
    /// No web client; `use_web` defaults to off.
    #[default]
    Disabled,
    Fixture {
        dir: PathBuf,
    },
    Http {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl WebMode {
    pub fn name(&self) -> &'static str {
        match self {
            WebMode::Disabled => "disabled",
            WebMode::Fixture { .. } => "fixture",
            WebMode::Http { .. } => "http",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendMode {
    #[default]
    Stub,
    Http {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl BackendMode {
    pub fn name(&self) -> &'static str {
        match self {
            BackendMode::Stub => "stub",
            BackendMode::Http { .. } => "http",
        }
    }
}

/// Service configuration, read from TOML or JSON.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Trained encoder file. Without one the service uses an untrained
    /// tied encoder built from `seed`.
    pub encoder_model: Option<PathBuf>,
    pub seed: u64,
    /// Index snapshot loaded at startup when the file exists.
    pub index_snapshot: Option<PathBuf>,
    /// Rewrite the snapshot after every knowledge-base change.
    pub persist_index: bool,
    pub gate: GateConfig,
    pub prompt: PromptConfig,
    pub max_tokens: usize,
    pub temperature: f64,
    pub web: WebMode,
    pub backend: BackendMode,
    /// Allowed CORS origins; `"*"` allows any. Empty disables CORS.
    pub cors_origins: Vec<String>,
    pub body_limit: usize,
    pub max_concurrent_generations: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.into(),
            encoder_model: None,
            seed: DEFAULT_SEED,
            index_snapshot: None,
            persist_index: false,
            gate: GateConfig::default(),
            prompt: PromptConfig::default(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            web: WebMode::default(),
            backend: BackendMode::default(),
            cors_origins: Vec::new(),
            body_limit: DEFAULT_BODY_LIMIT,
            max_concurrent_generations: DEFAULT_MAX_CONCURRENT_GENERATIONS,
        }
    }
}

impl ServiceConfig {
    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn from_path(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut config: Self = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            serde_json::from_str(&text)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.encoder_model.as_mut() {
            join(p);
        }
        if let Some(p) = self.index_snapshot.as_mut() {
            join(p);
        }
        if let WebMode::Fixture { dir } = &mut self.web {
            join(dir);
        }
    }

    pub fn settings(&self) -> PipelineSettings {
        let mut gate = self.gate.clone();
        if self.web == WebMode::Disabled {
            gate.use_web = false;
        }
        PipelineSettings {
            gate,
            prompt: self.prompt.clone(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.body_limit == 0 {
            return Err(ServiceError::Config("body_limit must be at least 1".into()));
        }
        if self.max_concurrent_generations == 0 {
            return Err(ServiceError::Config(
                "max_concurrent_generations must be at least 1".into(),
            ));
        }
        if self.persist_index && self.index_snapshot.is_none() {
            return Err(ServiceError::Config(
                "persist_index requires index_snapshot".into(),
            ));
        }
        self.settings()
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))
    }
}

pub(crate) fn timeout(ms: u64) -> Duration {
    Duration::from_millis(ms)
}
