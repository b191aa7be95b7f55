//! Chat-completion backend: `POST {model, messages, temperature, max_tokens}` with
//! bearer auth, bounded retries on transport errors, 429 and 5xx.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{AgentBackend, AgentError, AgentSpec, BackendReply, InvocationMeta, RenderedPrompt, Repair, TokenUsage};
use crate::config::BackendKind;
use crate::net::{Attempt, RetryPolicy, Throttle};

#[derive(Debug, Clone)]
pub struct ChatBackendSettings {
    pub endpoint: String,
    pub api_key: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout: Duration,
    pub min_interval: Duration,
    pub retry: RetryPolicy,
}

pub struct ChatBackend {
    settings: ChatBackendSettings,
    client: Client,
    throttle: Throttle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Failure {
    Timeout,
    Transport(String),
    Status(String),
    Fatal(String),
}

fn message(role: &str, content: impl Into<String>) -> ChatMessage {
    ChatMessage {
        role: role.into(),
        content: content.into(),
    }
}

pub fn repair_message(complaint: &str) -> String {
    format!("Your previous reply was rejected: {complaint}. Reply again with one corrected ```json block.")
}

impl ChatBackend {
    pub fn new(settings: ChatBackendSettings) -> Result<Self, AgentError> {
        let client = Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| AgentError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            throttle: Throttle::new(settings.min_interval),
            settings,
            client,
        })
    }

    pub fn request_body(&self, prompt: &RenderedPrompt, repairs: &[Repair]) -> ChatRequest {
        let mut messages = vec![message("system", &prompt.system), message("user", &prompt.user)];
        for r in repairs {
            messages.push(message("assistant", &r.reply));
            messages.push(message("user", repair_message(&r.complaint)));
        }
        ChatRequest {
            model: self.settings.model.clone(),
            messages,
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
        }
    }

    fn attempt(&self, body: &ChatRequest) -> Attempt<BackendReply, Failure> {
        self.throttle.wait();
        let resp = match self
            .client
            .post(&self.settings.endpoint)
            .bearer_auth(&self.settings.api_key)
            .json(body)
            .send()
        {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(Failure::Timeout),
            Err(e) => return Attempt::Retry(Failure::Transport(e.to_string())),
        };
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Retry(Failure::Status(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Attempt::Fail(Failure::Fatal(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = match resp.json() {
            Ok(p) => p,
            Err(e) if e.is_timeout() => return Attempt::Retry(Failure::Timeout),
            Err(e) => return Attempt::Fail(Failure::Fatal(format!("malformed completion: {e}"))),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Fail(Failure::Fatal("completion has no choices".into()));
        };
        let usage = parsed
            .usage
            .map(|u| TokenUsage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Attempt::Done(BackendReply {
            raw_text: choice.message.content,
            usage,
        })
    }
}

impl AgentBackend for ChatBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Chat
    }

    fn supports_repair(&self) -> bool {
        true
    }

    fn complete(
        &self,
        _agent: &AgentSpec,
        prompt: &RenderedPrompt,
        _meta: InvocationMeta,
        repairs: &[Repair],
    ) -> Result<BackendReply, AgentError> {
        let body = self.request_body(prompt, repairs);
        self.settings.retry.run(|_| self.attempt(&body)).map_err(|(f, attempts)| match f {
            Failure::Timeout => AgentError::BackendTimeout { attempts },
            Failure::Transport(e) => AgentError::BackendUnavailable(format!("{e} (after {attempts} attempts)")),
            Failure::Status(last) => AgentError::RetriesExhausted { attempts, last },
            Failure::Fatal(e) => AgentError::BackendUnavailable(e),
        })
    }
}
