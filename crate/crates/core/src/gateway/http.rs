//! OpenAI-compatible `/chat/completions` backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{Backend, BackendReply, BackendRequest, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// e.g. `http://localhost:8000/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    /// Send the schema through `response_format` (json_schema).
    pub structured_output: bool,
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    config: HttpConfig,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let endpoint = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        Self {
            agent,
            endpoint,
            config,
        }
    }

    pub fn request_body(&self, req: &BackendRequest<'_>) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
            "stream": false,
        });
        if self.config.structured_output {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {
                    "name": req.schema.as_str(),
                    "schema": req.schema.json_schema(),
                    "strict": true,
                }
            });
        }
        body
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

/// Maps a completion response body to a reply.
pub fn parse_completion(body: &str) -> Result<BackendReply, TransportError> {
    let parsed: CompletionResponse = serde_json::from_str(body)
        .map_err(|e| TransportError::retryable(format!("malformed completion body: {e}")))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportError::retryable("completion has no message content"))?;
    Ok(BackendReply {
        text,
        prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
        output_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
    })
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> &str {
        "http"
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, TransportError> {
        let mut call = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(self.request_body(req))
            .map_err(|e| TransportError::retryable(format!("transport: {e}")))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::retryable(format!("reading body: {e}")))?;
        match status {
            200..=299 => parse_completion(&body),
            429 | 500..=599 => Err(TransportError::retryable(format!("HTTP {status}: {body}"))),
            _ => Err(TransportError::fatal(format!("HTTP {status}: {body}"))),
        }
    }
}
