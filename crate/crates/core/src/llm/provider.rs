//! Chat-completion providers.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::prompts::PromptFamily;
use crate::types::MaskProvenance;

/// Environment variable holding the API key for [`HttpProvider`].
pub const API_KEY_VAR: &str = "MIRL_API_KEY";
/// Optional override of the OpenAI-compatible base URL.
pub const API_BASE_VAR: &str = "MIRL_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub family: PromptFamily,
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
    /// Repetition index; distinct rounds are cached separately.
    pub round: u32,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("http request failed: {0}")]
    Http(String),
    #[error("malformed provider response: {0}")]
    Response(String),
    #[error("provider cannot answer: {0}")]
    Unsupported(String),
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;

    /// Provenance recorded on masks this provider produced.
    fn provenance(&self) -> MaskProvenance {
        MaskProvenance::Llm
    }

    /// Whether failed calls should back off before retrying.
    fn is_remote(&self) -> bool {
        true
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base_url: String,
    api_key: String,
    timeout: Duration,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        HttpProvider {
            base_url: base_url.into(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(120),
        }
    }

    /// `None` when no API key is configured.
    pub fn from_env() -> Option<Self> {
        let key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty())?;
        let base = std::env::var(API_BASE_VAR).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Some(HttpProvider::new(base, key))
    }
}

/// Answers nothing; only cached responses can succeed behind it.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayProvider;

impl ChatProvider for ReplayProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        Err(ProviderError::Unsupported(format!(
            "cache replay has no {} response for model {}",
            request.family.name(),
            request.model
        )))
    }

    fn is_remote(&self) -> bool {
        false
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .new_agent();
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut response = agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| ProviderError::Http(e.to_string()))?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Response(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Response(format!("no message content in {value}")))
    }
}
