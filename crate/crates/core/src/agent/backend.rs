//! Model backends: the trait, a call recorder, a scripted backend, and URI
//! based construction.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::http::HttpChatBackend;
use super::mock::{RuleConverter, RuleEvaluator, RulePlanner};
use crate::config::AppConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub text: bool,
    pub vision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Non-text evidence attached to a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub media_type: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            attachments: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Which stage issued the request: `planner`, `converter` or `evaluator`.
    pub stage: String,
    pub messages: Vec<ChatMessage>,
    /// The request carries scene evidence and needs a vision-capable model.
    pub vision: bool,
}

impl ChatRequest {
    /// Text of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend `{0}` is text-only and cannot take a vision request")]
    VisionUnsupported(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend reply: {0}")]
    Protocol(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("scripted backend has no reply left")]
    ScriptExhausted,
}

pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    /// Performs the request. Callers go through [`send`], which applies the
    /// capability check first.
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Sends `request`, rejecting vision requests to text-only backends before
/// any I/O happens.
pub fn send(backend: &dyn ModelBackend, request: &ChatRequest) -> Result<String, BackendError> {
    if request.vision && !backend.capabilities().vision {
        return Err(BackendError::VisionUnsupported(backend.name().to_string()));
    }
    backend.complete(request)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub request: ChatRequest,
    pub reply: Result<String, BackendError>,
}

/// Wraps a backend and records every request that reaches it.
pub struct RecordingBackend {
    inner: Arc<dyn ModelBackend>,
    calls: Mutex<Vec<CallRecord>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ModelBackend>) -> Self {
        RecordingBackend {
            inner,
            calls: Mutex::new(vec![]),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("call log lock").len()
    }
}

impl ModelBackend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let reply = self.inner.complete(request);
        self.calls.lock().expect("call log lock").push(CallRecord {
            request: request.clone(),
            reply: reply.clone(),
        });
        reply
    }
}

/// Replies from a fixed queue; an exhausted queue is an error.
pub struct ScriptedBackend {
    name: String,
    caps: Capabilities,
    replies: Mutex<VecDeque<Result<String, BackendError>>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn with_results(replies: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        ScriptedBackend {
            name: "mock://script".into(),
            caps: Capabilities { text: true, vision: true },
            replies: Mutex::new(replies.into_iter().collect()),
        }
    }

    pub fn text_only(mut self) -> Self {
        self.caps.vision = false;
        self
    }

    /// Same reply forever.
    pub fn repeating(reply: &str, times: usize) -> Self {
        Self::new(std::iter::repeat(reply.to_string()).take(times))
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn complete(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        self.replies
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or(Err(BackendError::ScriptExhausted))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Planner,
    Converter,
    Evaluator,
}

/// Builds a backend from a config URI.
///
/// * `mock://rules`: the deterministic rule-based mock for `stage`.
/// * `mock://rules-text`: the same mock advertising text-only capability.
/// * `http://...` / `https://...`: a chat-completions endpoint. An optional
///   `#model=<name>` fragment selects the model and `#text-only` marks it
///   as lacking vision.
pub fn backend_from_uri(
    uri: &str,
    stage: Stage,
    registry: Arc<AppConfig>,
    timeout: Duration,
) -> Result<Arc<dyn ModelBackend>, BackendError> {
    let text_only = uri.ends_with("rules-text") || uri.contains("#text-only");
    if uri.starts_with("mock://rules") {
        let b: Arc<dyn ModelBackend> = match stage {
            Stage::Planner => Arc::new(RulePlanner::new(registry).vision(!text_only)),
            Stage::Converter => Arc::new(RuleConverter::new(registry)),
            Stage::Evaluator => Arc::new(RuleEvaluator::new(registry).vision(!text_only)),
        };
        return Ok(b);
    }
    if uri.starts_with("http://") || uri.starts_with("https://") {
        let (endpoint, fragment) = uri.split_once('#').unwrap_or((uri, ""));
        let model = fragment
            .split('&')
            .find_map(|kv| kv.strip_prefix("model="))
            .unwrap_or("default");
        let b = HttpChatBackend::new(endpoint, model, Capabilities { text: true, vision: !text_only }, timeout)?;
        return Ok(Arc::new(b));
    }
    Err(BackendError::Config(format!("unsupported backend uri `{uri}`")))
}

/// The three stage backends of one agent.
#[derive(Clone)]
pub struct Backends {
    pub planner: Arc<dyn ModelBackend>,
    pub converter: Arc<dyn ModelBackend>,
    pub evaluator: Arc<dyn ModelBackend>,
}

impl Backends {
    /// Backends named in the registry's `[agent]` section.
    pub fn from_config(registry: Arc<AppConfig>) -> Result<Self, BackendError> {
        let t = Duration::from_secs(registry.agent.timeout_secs);
        let a = registry.agent.clone();
        Ok(Backends {
            planner: backend_from_uri(&a.planner, Stage::Planner, registry.clone(), t)?,
            converter: backend_from_uri(&a.converter, Stage::Converter, registry.clone(), t)?,
            evaluator: backend_from_uri(&a.evaluator, Stage::Evaluator, registry, t)?,
        })
    }

    /// Rule-based mocks for all three stages.
    pub fn mock(registry: Arc<AppConfig>) -> Self {
        Backends {
            planner: Arc::new(RulePlanner::new(registry.clone())),
            converter: Arc::new(RuleConverter::new(registry.clone())),
            evaluator: Arc::new(RuleEvaluator::new(registry)),
        }
    }
}
