//! The planner, converter and evaluator stages.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{send, BackendError, ChatMessage, ChatRequest, ModelBackend};
use super::dsl::{parse_skill_call, SkillCall, SyntaxError};
use super::prompt::{render, scene_evidence, PromptError, PromptProfile};
use super::Outcome;
use crate::scene::Scene;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no numbered steps in {attempts} planner replies")]
    PlanningFailed { attempts: u32, raw: String },
    #[error("no parseable skill call in converter reply: {error}")]
    ConversionFailed { raw: String, error: SyntaxError },
    #[error("verdict is ambiguous: {raw:?}")]
    AmbiguousVerdict { raw: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub instruction: String,
    /// Never empty.
    pub steps: Vec<String>,
    pub raw: String,
    /// Identifies the scene evidence the plan was made from.
    pub snapshot_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub reason: String,
    pub raw: String,
}

fn step_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)[.)]\s+(.+?)\s*$").expect("static regex"))
}

/// Lines of `raw` that look like `N. text` or `N) text`, in order.
pub fn extract_steps(raw: &str) -> Vec<String> {
    raw.lines()
        .filter_map(|l| step_regex().captures(l).map(|c| c[2].to_string()))
        .collect()
}

/// Contents of the first fenced block, or the whole reply when unfenced.
pub fn extract_code(raw: &str) -> &str {
    let Some(open) = raw.find("```") else { return raw.trim() };
    let after = &raw[open + 3..];
    // Skip an info string on the fence line.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let info = &after[..body_start];
    let body = if info.trim().chars().all(|c| c.is_ascii_alphanumeric()) {
        &after[body_start..]
    } else {
        after
    };
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// `Some(outcome)` when exactly one of `SUCCESS` / `FAILURE` occurs.
pub fn extract_verdict(raw: &str) -> Option<Outcome> {
    match (raw.contains("SUCCESS"), raw.contains("FAILURE")) {
        (true, false) => Some(Outcome::Success),
        (false, true) => Some(Outcome::Failure),
        _ => None,
    }
}

/// Stable identifier of a scene state.
pub fn snapshot_id(scene: &Scene) -> String {
    format!("{}@{}", scene.scenario, scene.tick)
}

fn request(stage: &str, prompt: String, vision: bool) -> ChatRequest {
    ChatRequest {
        stage: stage.to_string(),
        messages: vec![ChatMessage::user(prompt)],
        vision,
    }
}

/// Decomposes `instruction` into numbered steps. `evidence` is `None` when
/// planner vision is disabled; the prompt then carries no scene.
pub fn plan(
    backend: &dyn ModelBackend,
    profile: &PromptProfile,
    instruction: &str,
    evidence: Option<&Scene>,
    failure_context: Option<&str>,
    parse_retries: u32,
) -> Result<Plan, StageError> {
    if instruction.trim().is_empty() {
        return Err(StageError::Precondition("instruction is empty".into()));
    }
    let mut vars = BTreeMap::from([
        ("instruction", instruction.trim().to_string()),
        ("examples", profile.planner_examples.clone()),
    ]);
    if let Some(s) = evidence {
        vars.insert("scene_evidence", scene_evidence(s));
    }
    if let Some(f) = failure_context {
        vars.insert("failure_context", f.to_string());
    }
    let req = request("planner", render(&profile.planner, &vars)?, evidence.is_some());
    let mut raw = String::new();
    for _ in 0..=parse_retries {
        raw = send(backend, &req)?;
        let steps = extract_steps(&raw);
        if !steps.is_empty() {
            return Ok(Plan {
                instruction: instruction.trim().to_string(),
                steps,
                raw,
                snapshot_id: evidence.map(snapshot_id),
            });
        }
    }
    Err(StageError::PlanningFailed {
        attempts: parse_retries + 1,
        raw,
    })
}

/// Translates one step into one skill call. Returns the call and the raw reply.
pub fn convert(
    backend: &dyn ModelBackend,
    profile: &PromptProfile,
    step: &str,
    parse_retries: u32,
) -> Result<(SkillCall, String), StageError> {
    if step.trim().is_empty() {
        return Err(StageError::Precondition("step is empty".into()));
    }
    let vars = BTreeMap::from([
        ("instruction", step.trim().to_string()),
        ("examples", profile.converter_examples.clone()),
    ]);
    let req = request("converter", render(&profile.converter, &vars)?, false);
    let mut last = None;
    for _ in 0..=parse_retries {
        let raw = send(backend, &req)?;
        match parse_skill_call(extract_code(&raw)) {
            Ok(call) => return Ok((call, raw)),
            Err(error) => last = Some(StageError::ConversionFailed { raw, error }),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Judges the scene against the end-state description.
pub fn evaluate(
    backend: &dyn ModelBackend,
    profile: &PromptProfile,
    goal_state: &str,
    scene: &Scene,
    parse_retries: u32,
) -> Result<Verdict, StageError> {
    let vars = BTreeMap::from([
        ("goal_state", goal_state.trim().to_string()),
        ("scene_evidence", scene_evidence(scene)),
    ]);
    let req = request("evaluator", render(&profile.evaluator, &vars)?, true);
    let mut raw = String::new();
    for _ in 0..=parse_retries {
        raw = send(backend, &req)?;
        if let Some(outcome) = extract_verdict(&raw) {
            let token = match outcome {
                Outcome::Success => "SUCCESS",
                Outcome::Failure => "FAILURE",
            };
            let reason = raw
                .replacen(token, "", 1)
                .trim_matches(|c: char| c.is_whitespace() || c == ':' || c == '-' || c == '.')
                .to_string();
            return Ok(Verdict {
                outcome,
                reason: if reason.is_empty() { token.to_lowercase() } else { reason },
                raw,
            });
        }
    }
    Err(StageError::AmbiguousVerdict { raw })
}
