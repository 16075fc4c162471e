//! Vendor chat-completion protocols over blocking HTTP.

use reqwest::blocking::Client;
use serde_json::{json, Value};
use std::time::{Duration, Instant};

use super::{Capabilities, ChatProvider, ChatRequest, ChatResponse, Role, Usage};
use crate::error::GatewayError;

fn client(timeout: Duration) -> Result<Client, GatewayError> {
    Client::builder().timeout(timeout).build().map_err(|e| GatewayError::Config(e.to_string()))
}

fn credential(var: &str) -> Result<String, GatewayError> {
    std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.to_string()))
}

fn post(provider: &str, timeout: Duration, builder: reqwest::blocking::RequestBuilder) -> Result<Value, GatewayError> {
    let resp = builder.send().map_err(|e| {
        if e.is_timeout() {
            GatewayError::Timeout { secs: timeout.as_secs() }
        } else {
            GatewayError::Transport(e.to_string())
        }
    })?;
    let status = resp.status().as_u16();
    let body = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
    match status {
        200..=299 => serde_json::from_str(&body).map_err(|e| GatewayError::Malformed(format!("{provider}: {e}"))),
        401 | 403 => Err(GatewayError::Auth { provider: provider.to_string(), status }),
        _ => Err(GatewayError::Rejected { status, body: body.chars().take(500).collect() }),
    }
}

fn role(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// OpenAI-compatible `/chat/completions` endpoints.
pub struct OpenAiProvider {
    id: String,
    endpoint: String,
    api_key: String,
    caps: Capabilities,
    timeout: Duration,
    client: Client,
}

impl OpenAiProvider {
    pub fn new(
        id: impl Into<String>,
        endpoint: impl Into<String>,
        credential_env: &str,
        caps: Capabilities,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        Ok(OpenAiProvider {
            id: id.into(),
            endpoint: endpoint.into(),
            api_key: credential(credential_env)?,
            caps,
            timeout,
            client: client(timeout)?,
        })
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> =
            request.messages.iter().map(|m| json!({"role": role(m.role), "content": m.content})).collect();
        let mut body = json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "n": request.n_samples,
        });
        if let Some(effort) = request.reasoning_effort {
            body["reasoning_effort"] = json!(effort.as_str());
            body["max_completion_tokens"] = json!(request.max_tokens);
        } else {
            body["max_tokens"] = json!(request.max_tokens);
        }
        body
    }

    pub fn parse(&self, value: &Value) -> Result<(Vec<String>, Usage), GatewayError> {
        let choices = value["choices"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed(format!("{}: no choices array", self.id)))?;
        let completions = choices
            .iter()
            .map(|c| {
                c["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| GatewayError::Malformed(format!("{}: choice without content", self.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let usage = Usage {
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok((completions, usage))
    }
}

impl ChatProvider for OpenAiProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let builder = self.client.post(&self.endpoint).bearer_auth(&self.api_key).json(&self.body(request));
        let value = post(&self.id, self.timeout, builder)?;
        let (completions, usage) = self.parse(&value)?;
        Ok(ChatResponse {
            completions,
            usage,
            provider_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis().max(1) as u64,
        })
    }
}

pub const ANTHROPIC_VERSION: &str = "2023-06-01";

/// Anthropic Messages API. One completion per call.
pub struct AnthropicProvider {
    id: String,
    endpoint: String,
    api_key: String,
    caps: Capabilities,
    timeout: Duration,
    client: Client,
}

impl AnthropicProvider {
    pub fn new(
        id: impl Into<String>,
        endpoint: impl Into<String>,
        credential_env: &str,
        caps: Capabilities,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        Ok(AnthropicProvider {
            id: id.into(),
            endpoint: endpoint.into(),
            api_key: credential(credential_env)?,
            caps: Capabilities { native_multi_sample: false, ..caps },
            timeout,
            client: client(timeout)?,
        })
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        let system: Vec<&str> =
            request.messages.iter().filter(|m| m.role == Role::System).map(|m| m.content.as_str()).collect();
        let messages: Vec<Value> = request
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| json!({"role": role(m.role), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": request.model_name,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        if !system.is_empty() {
            body["system"] = json!(system.join("\n\n"));
        }
        if request.extended_thinking {
            body["thinking"] = json!({"type": "enabled", "budget_tokens": request.max_tokens / 2});
        }
        body
    }

    pub fn parse(&self, value: &Value) -> Result<(String, Usage), GatewayError> {
        let blocks = value["content"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed(format!("{}: no content array", self.id)))?;
        let text: Vec<&str> =
            blocks.iter().filter(|b| b["type"] == "text").filter_map(|b| b["text"].as_str()).collect();
        if text.is_empty() {
            return Err(GatewayError::Malformed(format!("{}: no text block", self.id)));
        }
        let usage = Usage {
            prompt_tokens: value["usage"]["input_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["output_tokens"].as_u64().unwrap_or(0),
        };
        Ok((text.concat(), usage))
    }
}

impl ChatProvider for AnthropicProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.n_samples != 1 {
            return Err(GatewayError::InvalidRequest("anthropic provider sends one sample per call".into()));
        }
        let started = Instant::now();
        let builder = self
            .client
            .post(&self.endpoint)
            .header("x-api-key", &self.api_key)
            .header("anthropic-version", ANTHROPIC_VERSION)
            .json(&self.body(request));
        let value = post(&self.id, self.timeout, builder)?;
        let (text, usage) = self.parse(&value)?;
        Ok(ChatResponse {
            completions: vec![text],
            usage,
            provider_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis().max(1) as u64,
        })
    }
}
