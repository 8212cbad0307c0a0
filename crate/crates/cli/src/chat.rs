//! `chat-http` backend: an OpenAI-style chat-completions endpoint.

use std::time::Duration;

use dialogic_core::coder::{Backend, BackendError, ChatMessage};
use serde::{Deserialize, Serialize};

pub const CHAT_BACKEND_ID: &str = "chat-http";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatConfig {
    pub endpoint: String,
    pub model: String,
    pub credential_env: String,
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f32,
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

pub struct ChatHttpBackend {
    config: ChatConfig,
    key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for ChatHttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatHttpBackend")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ChatHttpBackend {
    /// Reads the credential from the configured environment variable.
    pub fn new(config: ChatConfig) -> Result<Self, String> {
        let key = std::env::var(&config.credential_env).map_err(|_| {
            format!(
                "environment variable {} with the backend credential is not set",
                config.credential_env
            )
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| format!("cannot build HTTP client: {e}"))?;
        Ok(ChatHttpBackend {
            config,
            key,
            client,
        })
    }
}

impl Backend for ChatHttpBackend {
    fn id(&self) -> &str {
        CHAT_BACKEND_ID
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = Request {
            model: &self.config.model,
            messages,
            temperature: 0.0,
        };
        let response = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("endpoint answered {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::Rejected(format!("endpoint answered {status}: {text}")));
        }
        let reply: Reply = response
            .json()
            .map_err(|e| BackendError::Rejected(format!("unreadable reply: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Rejected("reply has no choices".into()))
    }
}
