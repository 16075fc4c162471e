use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use super::{
    AnthropicProvider, Capabilities, ChatProvider, Gateway, OpenAiProvider, RetryPolicy, DEFAULT_MAX_ATTEMPTS,
    DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT_SECS,
};
use crate::error::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Openai,
    Anthropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub kind: ProviderKind,
    pub endpoint: String,
    /// Environment variable holding the API key. Keys never live in files.
    pub credential_env: String,
    pub models: Vec<String>,
    #[serde(default)]
    pub native_multi_sample: bool,
    #[serde(default)]
    pub reasoning_effort: bool,
    #[serde(default)]
    pub extended_thinking: bool,
}

impl ProviderConfig {
    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            native_multi_sample: self.native_multi_sample,
            reasoning_effort: self.reasoning_effort,
            extended_thinking: self.extended_thinking,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewaySettings {
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

/// Provider configuration file (TOML, or JSON when the extension is `.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub gateway: GatewaySettings,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        crate::config::load_file(path).map_err(GatewayError::Config)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_attempts: self.gateway.max_attempts.max(1), ..RetryPolicy::default() }
    }

    /// Instantiate live HTTP providers, routing each listed model to its provider.
    pub fn build(&self) -> Result<Gateway, GatewayError> {
        let timeout = Duration::from_secs(self.gateway.timeout_secs);
        let mut routes: BTreeMap<String, Arc<dyn ChatProvider>> = BTreeMap::new();
        for p in &self.providers {
            let provider: Arc<dyn ChatProvider> = match p.kind {
                ProviderKind::Openai => {
                    Arc::new(OpenAiProvider::new(&p.name, &p.endpoint, &p.credential_env, p.capabilities(), timeout)?)
                }
                ProviderKind::Anthropic => Arc::new(AnthropicProvider::new(
                    &p.name,
                    &p.endpoint,
                    &p.credential_env,
                    p.capabilities(),
                    timeout,
                )?),
            };
            for model in &p.models {
                if routes.insert(model.clone(), provider.clone()).is_some() {
                    return Err(GatewayError::Config(format!("model {model} is listed by more than one provider")));
                }
            }
        }
        Ok(Gateway::routed(routes).with_retry(self.retry_policy()).with_max_in_flight(self.gateway.max_in_flight))
    }
}
