//! The agent: model backends, the three stages, the skill-call language and
//! the closed loop that ties them to an executor.

pub mod backend;
pub mod dsl;
pub mod episode;
pub mod http;
pub mod mock;
pub mod prompt;
pub mod stages;

use serde::{Deserialize, Serialize};

pub use backend::{
    backend_from_uri, send, BackendError, Backends, Capabilities, ChatMessage, ChatRequest, ModelBackend,
    RecordingBackend, ScriptedBackend, Stage,
};
pub use dsl::{format_skill_call, parse_skill_call, SkillCall, SyntaxError};
pub use episode::{run_episode, AgentEnv, AgentError, EpisodeResult, Executor, FinalVerdict, StepRecord};
pub use prompt::{ProfileKind, PromptProfile};
pub use stages::{convert, evaluate, plan, Plan, StageError, Verdict};

use crate::config::AgentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// Loop bounds and stage switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_attempts: u32,
    pub parse_retries: u32,
    pub evaluator_enabled: bool,
    pub planner_vision_enabled: bool,
    /// With the planner off, every detected object becomes one converter step.
    pub planner_enabled: bool,
    /// Simulator events quoted in the re-planning context.
    pub failure_context_events: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_attempts: 3,
            parse_retries: 2,
            evaluator_enabled: true,
            planner_vision_enabled: true,
            planner_enabled: true,
            failure_context_events: 10,
        }
    }
}

impl LoopConfig {
    pub fn from_agent(a: &AgentConfig) -> Self {
        LoopConfig {
            max_attempts: a.max_attempts,
            parse_retries: a.parse_retries,
            failure_context_events: a.failure_context_events,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        Ok(())
    }
}
