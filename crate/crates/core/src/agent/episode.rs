//! The closed loop: plan, convert and execute each step, evaluate, re-plan.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{BackendError, Backends};
use super::dsl::SkillCall;
use super::prompt::{failure_context, PromptProfile};
use super::stages::{self, Plan, StageError};
use super::{LoopConfig, Outcome};
use crate::config::TaskSpec;
use crate::events::{EventBody, EventSink};
use crate::scene::{canonical_value, check_goal, GoalVerdict, Scene};
use crate::skills::{SkillOutcome, SkillStatus};
use crate::speech::{AudioHandle, TtsClient};

/// Side that carries out skill calls against a world.
pub trait Executor {
    fn execute(&mut self, call: &SkillCall) -> SkillOutcome;
    fn snapshot(&self) -> Scene;
    /// Labels of the objects currently detected.
    fn candidates(&self) -> Vec<String>;
}

#[derive(Debug, Error)]
pub enum AgentError {
    /// A backend could not be reached or refused the request; the episode
    /// stops without a verdict.
    #[error("{stage} backend: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("invalid loop configuration: {0}")]
    Config(String),
}

/// What the loop decided, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalVerdict {
    pub outcome: Outcome,
    pub reason: String,
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub attempt: u32,
    pub index: usize,
    pub outcome: SkillOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Plan invocations made; never exceeds `max_attempts`.
    pub attempts: u32,
    pub final_verdict: FinalVerdict,
    /// `check_goal` on the final scene; `None` for tasks without a goal.
    pub ground_truth: Option<GoalVerdict>,
    pub steps: Vec<StepRecord>,
    pub plans: Vec<Plan>,
}

impl EpisodeResult {
    /// True when at least one vlamove completed.
    pub fn any_move_ok(&self) -> bool {
        self.steps
            .iter()
            .any(|s| s.outcome.status == SkillStatus::Ok && matches!(s.outcome.call, SkillCall::Vlamove { .. }))
    }
}

/// Everything an episode runs against besides the world.
pub struct AgentEnv<'a> {
    pub backends: &'a Backends,
    pub profile: &'a PromptProfile,
    pub config: LoopConfig,
    /// Speaks feedback aloud when bound; text is always logged.
    pub tts: Option<&'a dyn TtsClient>,
    /// The instruction was transcribed from speech.
    pub spoken: bool,
}

fn is_fatal(e: &BackendError) -> bool {
    !matches!(e, BackendError::Protocol(_))
}

/// Turns a stage error into either an aborted attempt (returned as the
/// failure reason) or a fatal backend error.
fn stage_failure(stage: &'static str, e: StageError, sink: &mut dyn EventSink) -> Result<String, AgentError> {
    if let StageError::Backend(b) = &e {
        if is_fatal(b) {
            sink.emit(EventBody::Error {
                stage: stage.into(),
                message: e.to_string(),
            });
            return Err(AgentError::Backend {
                stage,
                source: b.clone(),
            });
        }
    }
    let message = e.to_string();
    sink.emit(EventBody::Error {
        stage: stage.into(),
        message: message.clone(),
    });
    Ok(format!("{stage} failed: {message}"))
}

fn speak(env: &AgentEnv<'_>, sink: &mut dyn EventSink, text: String) {
    let audio = env.tts.and_then(|t| match t.synthesize(&text) {
        Ok(AudioHandle::NoOp) => None,
        Ok(AudioHandle::Uri(u)) => Some(u),
        Err(e) => {
            sink.emit(EventBody::Error {
                stage: "tts".into(),
                message: e.to_string(),
            });
            None
        }
    });
    sink.emit(EventBody::SpeechOut { text, audio });
}

fn describe(outcome: &SkillOutcome) -> String {
    match (&outcome.call, outcome.status) {
        (SkillCall::Done, _) => "Finished.".into(),
        (SkillCall::Vlamove { pick, place }, SkillStatus::Ok) => format!("I put the {pick} on the {place}."),
        (SkillCall::Vlamove { pick, .. }, SkillStatus::GraspFailed) => format!("I could not grasp the {pick}."),
        (SkillCall::Vlamove { pick, place }, _) => format!(
            "I could not move the {pick} to the {place}: {}.",
            outcome.detail.as_deref().unwrap_or("unknown reason")
        ),
    }
}

/// Runs one instruction to completion.
///
/// Each attempt plans (or, with the planner disabled, makes one step per
/// detected object), converts and executes every step in order, then
/// evaluates. A failed or aborted attempt triggers a re-plan carrying the
/// failure reason and the latest simulator events, up to `max_attempts`.
pub fn run_episode(
    env: &AgentEnv<'_>,
    task: &TaskSpec,
    executor: &mut dyn Executor,
    sink: &mut dyn EventSink,
) -> Result<EpisodeResult, AgentError> {
    let cfg = &env.config;
    cfg.validate().map_err(AgentError::Config)?;
    sink.emit(EventBody::Instruction {
        text: task.instruction.clone(),
        source: if env.spoken { "audio" } else { "text" }.into(),
    });
    let mut result = EpisodeResult {
        attempts: 0,
        final_verdict: FinalVerdict {
            outcome: Outcome::Failure,
            reason: "no attempt was made".into(),
            evaluated: false,
        },
        ground_truth: None,
        steps: vec![],
        plans: vec![],
    };
    let mut failure: Option<String> = None;

    for attempt in 1..=cfg.max_attempts {
        result.attempts = attempt;
        let before = executor.snapshot();
        let context = failure.as_ref().map(|reason| {
            let n = before.event_log.len().saturating_sub(cfg.failure_context_events);
            failure_context(reason, &before.event_log[n..])
        });

        let planned = if cfg.planner_enabled {
            let evidence = cfg.planner_vision_enabled.then_some(&before);
            stages::plan(
                env.backends.planner.as_ref(),
                env.profile,
                &task.instruction,
                evidence,
                context.as_deref(),
                cfg.parse_retries,
            )
        } else {
            let steps: Vec<String> = executor
                .candidates()
                .into_iter()
                .map(|label| format!("{} (object: {label})", task.instruction.trim()))
                .collect();
            if steps.is_empty() {
                Err(StageError::Precondition("no objects detected".into()))
            } else {
                Ok(Plan {
                    instruction: task.instruction.trim().to_string(),
                    raw: String::new(),
                    snapshot_id: Some(stages::snapshot_id(&before)),
                    steps,
                })
            }
        };

        let mut reason: Option<String> = None;
        match planned {
            Err(e) => reason = Some(stage_failure("planner", e, sink)?),
            Ok(plan) => {
                sink.emit(EventBody::Plan {
                    attempt,
                    steps: plan.steps.clone(),
                    raw: plan.raw.clone(),
                    snapshot_id: plan.snapshot_id.clone(),
                });
                for (index, step) in plan.steps.iter().enumerate() {
                    sink.emit(EventBody::StepStarted {
                        attempt,
                        index,
                        step: step.clone(),
                    });
                    let (call, raw) = match stages::convert(
                        env.backends.converter.as_ref(),
                        env.profile,
                        step,
                        cfg.parse_retries,
                    ) {
                        Ok(c) => c,
                        Err(e) => {
                            reason = Some(stage_failure("converter", e, sink)?);
                            break;
                        }
                    };
                    sink.emit(EventBody::SkillCall {
                        attempt,
                        index,
                        call: call.clone(),
                        raw,
                    });
                    let outcome = executor.execute(&call);
                    for event in &outcome.events {
                        sink.emit(EventBody::SimEvent {
                            attempt,
                            index,
                            event: event.clone(),
                        });
                    }
                    sink.emit(EventBody::StepResult {
                        attempt,
                        index,
                        status: outcome.status,
                        detail: outcome.detail.clone(),
                        trajectory: outcome.trajectory.clone(),
                    });
                    speak(env, sink, describe(&outcome));
                    let stop = call == SkillCall::Done && cfg.planner_enabled;
                    result.steps.push(StepRecord { attempt, index, outcome });
                    if stop {
                        break;
                    }
                }
                result.plans.push(plan);
            }
        }

        let after = executor.snapshot();
        sink.emit(EventBody::SceneSnapshot {
            scene: canonical_value(&after).expect("scenes serialize"),
        });
        let ground_truth = (!task.goal.is_empty()).then(|| check_goal(&after, &task.goal));

        let verdict = match reason {
            Some(r) => FinalVerdict {
                outcome: Outcome::Failure,
                reason: r,
                evaluated: false,
            },
            None if cfg.evaluator_enabled => {
                match stages::evaluate(
                    env.backends.evaluator.as_ref(),
                    env.profile,
                    &task.goal_state,
                    &after,
                    cfg.parse_retries,
                ) {
                    Ok(v) => FinalVerdict {
                        outcome: v.outcome,
                        reason: v.reason,
                        evaluated: true,
                    },
                    Err(e) => FinalVerdict {
                        outcome: Outcome::Failure,
                        reason: stage_failure("evaluator", e, sink)?,
                        evaluated: false,
                    },
                }
            }
            None => FinalVerdict {
                outcome: Outcome::Success,
                reason: "evaluator disabled; success assumed".into(),
                evaluated: false,
            },
        };
        let discrepancy = ground_truth
            .as_ref()
            .is_some_and(|g| g.satisfied != (verdict.outcome == Outcome::Success));
        sink.emit(EventBody::Verdict {
            attempt,
            outcome: verdict.outcome,
            reason: verdict.reason.clone(),
            evaluated: verdict.evaluated,
            ground_truth: ground_truth.clone(),
            discrepancy,
        });
        result.ground_truth = ground_truth;
        let done = verdict.outcome == Outcome::Success;
        failure = (!done).then(|| verdict.reason.clone());
        result.final_verdict = verdict;
        if done {
            break;
        }
    }

    let closing = match result.final_verdict.outcome {
        Outcome::Success => "Task complete.".to_string(),
        Outcome::Failure => format!(
            "I could not complete the task after {} attempt{}.",
            result.attempts,
            if result.attempts == 1 { "" } else { "s" }
        ),
    };
    speak(env, sink, closing);
    Ok(result)
}

