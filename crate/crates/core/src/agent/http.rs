//! Chat-completions client.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::backend::{BackendError, Capabilities, ChatRequest, ModelBackend, Role};

/// Speaks the common chat-completions wire format: messages with optional
/// image parts, reply text in `choices[0].message.content`.
pub struct HttpChatBackend {
    endpoint: String,
    model: String,
    caps: Capabilities,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(endpoint: &str, model: &str, caps: Capabilities, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpChatBackend {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            caps,
            client,
        })
    }

    /// JSON body for `request`.
    pub fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                if m.attachments.is_empty() {
                    return json!({"role": role, "content": m.content});
                }
                let mut parts = vec![json!({"type": "text", "text": m.content})];
                for a in &m.attachments {
                    let url = format!("data:{};base64,{}", a.media_type, STANDARD.encode(a.data.as_bytes()));
                    parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
                json!({"role": role, "content": parts})
            })
            .collect();
        json!({"model": self.model, "messages": messages, "temperature": 0})
    }
}

fn map_err(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

impl ModelBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.endpoint
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&self.body(request))
            .send()
            .map_err(map_err)?;
        let status = resp.status();
        let text = resp.text().map_err(map_err)?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }
}
