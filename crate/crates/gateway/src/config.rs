//! Gateway configuration file.
//!
//! ```toml
//! transcript_dir = "transcripts"
//! hover_time_scale = 1.0
//!
//! [llm]
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! api_key_env = "OPENAI_API_KEY"
//! model = "gpt-4o"
//!
//! [persona]
//! context = "The drones fly indoors in a 4 m by 4 m cage."
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use llmfleet::exec::ExecutionPolicy;
use llmfleet::llm::{ChatBackend, HttpBackend, HttpBackendConfig, PlanningSettings, Script, ScriptedBackend};
use llmfleet::prompt::{PersonaConfig, PromptTemplates};

use crate::service::GatewayOptions;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Chat-completions URL.
    pub endpoint: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f32>,
    pub max_tokens: Option<u32>,
    pub max_repairs: Option<u32>,
    pub request_timeout_ms: Option<u64>,
    /// Scripted replies instead of a live model.
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptPaths {
    pub system: Option<PathBuf>,
    pub user: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub transcript_dir: Option<PathBuf>,
    /// Scales hover waits; keep at 1.0 for real drones.
    pub hover_time_scale: Option<f64>,
    pub llm: LlmConfig,
    pub persona: PersonaConfig,
    pub prompts: PromptPaths,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("no LLM configured: set an endpoint or a mock script")]
    NoBackend,
    #[error("{0}")]
    Other(String),
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Toml { path: path.into(), source })
    }

    pub fn planning(&self) -> PlanningSettings {
        let mut s = PlanningSettings::default();
        if let Some(m) = &self.llm.model {
            s.model = m.clone();
        }
        if let Some(t) = self.llm.temperature {
            s.temperature = t;
        }
        if let Some(t) = self.llm.max_tokens {
            s.max_tokens = t;
        }
        if let Some(r) = self.llm.max_repairs {
            s.max_repairs = r;
        }
        s
    }

    pub fn options(&self) -> Result<GatewayOptions, ConfigError> {
        let templates = PromptTemplates::load(self.prompts.system.as_deref(), self.prompts.user.as_deref())
            .map_err(|e| ConfigError::Other(e.to_string()))?;
        Ok(GatewayOptions {
            planning: self.planning(),
            templates,
            persona: self.persona.clone(),
            policy: ExecutionPolicy { time_scale: self.hover_time_scale.unwrap_or(1.0) },
        })
    }

    /// The mock script wins over a live endpoint.
    pub fn backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        if let Some(path) = &self.llm.mock_script {
            let script = Script::load(path).map_err(|e| ConfigError::Other(e.to_string()))?;
            return Ok(Arc::new(ScriptedBackend::new(script)));
        }
        let endpoint = self.llm.endpoint.clone().ok_or(ConfigError::NoBackend)?;
        let mut http = HttpBackendConfig { endpoint, api_key_env: self.llm.api_key_env.clone(), ..Default::default() };
        if let Some(ms) = self.llm.request_timeout_ms {
            http.request_timeout = Duration::from_millis(ms);
        }
        let backend = HttpBackend::new(http).map_err(|e| ConfigError::Other(e.to_string()))?;
        Ok(Arc::new(backend))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let config: GatewayConfig = toml::from_str(
            r#"
            transcript_dir = "t"
            hover_time_scale = 0.5
            [llm]
            endpoint = "http://localhost:1/v1/chat/completions"
            api_key_env = "KEY"
            model = "m"
            max_repairs = 2
            [persona]
            context = "Indoors."
            extra_rules = ["Stay below 2 m."]
            "#,
        )
        .unwrap();
        assert_eq!(config.planning().model, "m");
        assert_eq!(config.planning().max_repairs, 2);
        assert_eq!(config.options().unwrap().policy.time_scale, 0.5);
        assert!(config.backend().is_ok());
        assert_eq!(config.persona.extra_rules.len(), 1);
    }

    #[test]
    fn needs_a_backend() {
        assert!(matches!(GatewayConfig::default().backend(), Err(ConfigError::NoBackend)));
        assert!(toml::from_str::<GatewayConfig>("bogus = 1").is_err());
    }
}
