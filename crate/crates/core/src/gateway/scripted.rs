use super::{Capabilities, ChatProvider, ChatRequest, ChatResponse, Usage};
use crate::error::GatewayError;
use crate::text::word_count;

type Script = dyn Fn(&ChatRequest) -> Result<Vec<String>, GatewayError> + Send + Sync;

/// A provider backed by a closure. Token usage is counted in whitespace words.
///
/// Used for tests, for capturing fixture stores from authored responses, and
/// as the target of [`Gateway::routed`](super::Gateway::routed)'s fallback.
pub struct ScriptedProvider {
    id: String,
    caps: Capabilities,
    script: Box<Script>,
}

impl ScriptedProvider {
    pub fn new<F>(id: impl Into<String>, caps: Capabilities, script: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<Vec<String>, GatewayError> + Send + Sync + 'static,
    {
        ScriptedProvider { id: id.into(), caps, script: Box::new(script) }
    }

    /// Echoes the last message back once per requested sample.
    pub fn echo() -> Self {
        Self::new("echo", Capabilities::ALL, |req| {
            let last = req.messages.last().map(|m| m.content.clone()).unwrap_or_default();
            Ok(vec![last; req.n_samples as usize])
        })
    }

    pub(super) fn unreachable() -> Self {
        Self::new("unrouted", Capabilities::default(), |req| Err(GatewayError::UnknownModel(req.model_name.clone())))
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let completions = (self.script)(request)?;
        let usage = Usage {
            prompt_tokens: request.messages.iter().map(|m| word_count(&m.content) as u64).sum(),
            completion_tokens: completions.iter().map(|c| word_count(c) as u64).sum(),
        };
        Ok(ChatResponse { completions, usage, provider_id: self.id.clone(), latency_ms: 1 })
    }
}
