//! Sessions and the registry that owns them.
//!
//! A session holds one scene that persists across instructions. At most one
//! episode runs per session; a second submission is rejected, not queued.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tabletop_core::agent::{run_episode, AgentEnv, Backends, LoopConfig, ProfileKind, PromptProfile};
use tabletop_core::bench::Mode;
use tabletop_core::config::{AppConfig, TaskSpec};
use tabletop_core::events::{Clock, EventBody, EventSink, SessionEvent};
use tabletop_core::perception::OracleDetector;
use tabletop_core::rng;
use tabletop_core::scene::{canonical_value, ScenarioKey, Scene};
use tabletop_core::skills::SimExecutor;
use tabletop_core::speech::{AsrClient, TtsClient, Vad, VadConfig};
use thiserror::Error;

use crate::log::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    /// Created but the initial snapshot is not yet published.
    Idle,
    Planning,
    Executing,
    Evaluating,
    AwaitingInstruction,
    Closed,
}

impl SessionState {
    pub fn is_busy(self) -> bool {
        matches!(self, SessionState::Planning | SessionState::Executing | SessionState::Evaluating)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("session limit of {0} reached")]
    Capacity(usize),
    #[error("session is busy ({0:?})")]
    Busy(SessionState),
    #[error("session is closed")]
    Closed,
    #[error("no ASR client bound")]
    NoAsr,
    #[error("no speech detected in the audio segment")]
    NoSpeech,
    #[error("speech recognition failed: {0}")]
    Speech(String),
    #[error("cannot open event log: {0}")]
    Log(String),
}

/// Everything sessions share.
pub struct ServiceConfig {
    pub registry: Arc<AppConfig>,
    pub backends: Backends,
    pub base_loop: LoopConfig,
    /// One `<id>.jsonl` per session when set.
    pub log_dir: Option<PathBuf>,
    /// Open (not closed) sessions allowed at once.
    pub capacity: usize,
    pub asr: Option<Arc<dyn AsrClient>>,
    pub tts: Option<Arc<dyn TtsClient>>,
    pub clock: Clock,
}

impl ServiceConfig {
    /// Rule-based backends, no speech clients, logical clock.
    pub fn mock(registry: Arc<AppConfig>) -> Self {
        ServiceConfig {
            backends: Backends::mock(registry.clone()),
            base_loop: LoopConfig::from_agent(&registry.agent),
            registry,
            log_dir: None,
            capacity: 64,
            asr: None,
            tts: None,
            clock: Clock::Logical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// Scenario number or `"real"`; taken from the task when omitted.
    #[serde(default)]
    pub scenario: Option<Value>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub fail_prob: f64,
    /// Registered task whose substitutions shape the scene.
    #[serde(default)]
    pub task: Option<String>,
}

/// Public view of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub id: String,
    pub scenario: ScenarioKey,
    pub seed: u64,
    pub mode: Mode,
    pub fail_prob: f64,
    pub task: Option<String>,
    pub state: SessionState,
    pub last_seq: u64,
    pub log_path: Option<String>,
    pub persist_error: Option<String>,
}

pub struct Session {
    pub id: String,
    scenario: ScenarioKey,
    seed: u64,
    mode: Mode,
    fail_prob: f64,
    task: Option<String>,
    state: Mutex<SessionState>,
    /// Scene between episodes.
    scene: Mutex<Scene>,
    /// Latest published snapshot and its seq.
    snapshot: Mutex<(u64, Value)>,
    pub log: EventLog,
}

impl Session {
    pub fn state(&self) -> SessionState {
        *self.state.lock().expect("state poisoned")
    }

    pub fn snapshot(&self) -> (u64, Value) {
        self.snapshot.lock().expect("snapshot poisoned").clone()
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor {
            id: self.id.clone(),
            scenario: self.scenario,
            seed: self.seed,
            mode: self.mode,
            fail_prob: self.fail_prob,
            task: self.task.clone(),
            state: self.state(),
            last_seq: self.log.head().seq,
            log_path: self.log.path().map(|p| p.display().to_string()),
            persist_error: self.log.persist_error(),
        }
    }

    fn set_state(&self, s: SessionState) {
        *self.state.lock().expect("state poisoned") = s;
    }

    /// Moves awaiting_instruction to planning atomically.
    fn claim(&self) -> Result<(), ServiceError> {
        let mut st = self.state.lock().expect("state poisoned");
        match *st {
            SessionState::AwaitingInstruction => {
                *st = SessionState::Planning;
                Ok(())
            }
            SessionState::Closed => Err(ServiceError::Closed),
            s => Err(ServiceError::Busy(s)),
        }
    }

    fn publish(&self, body: EventBody) -> SessionEvent {
        let snapshot = match &body {
            EventBody::SceneSnapshot { scene } => Some(scene.clone()),
            _ => None,
        };
        let e = self.log.append(body);
        if let Some(scene) = snapshot {
            *self.snapshot.lock().expect("snapshot poisoned") = (e.seq, scene);
        }
        e
    }
}

/// Routes episode events into the session log and tracks the pipeline
/// stage they imply.
struct StageSink<'a> {
    session: &'a Session,
}

impl EventSink for StageSink<'_> {
    fn emit(&mut self, body: EventBody) -> SessionEvent {
        let next = match &body {
            EventBody::Instruction { .. } => Some(SessionState::Planning),
            EventBody::Plan { .. } => Some(SessionState::Executing),
            // Emitted once execution of an attempt is over.
            EventBody::SceneSnapshot { .. } => Some(SessionState::Evaluating),
            EventBody::Verdict { outcome, .. } => {
                (*outcome != tabletop_core::agent::Outcome::Success).then_some(SessionState::Planning)
            }
            _ => None,
        };
        let e = self.session.publish(body);
        if let Some(s) = next {
            self.session.set_state(s);
        }
        e
    }
}

pub struct Service {
    cfg: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    counter: AtomicU64,
}

fn parse_scenario(v: &Value) -> Result<ScenarioKey, ServiceError> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => return Err(ServiceError::Invalid(format!("scenario must be a number or \"real\", got {other}"))),
    };
    text.parse().map_err(|e: tabletop_core::scene::SimError| ServiceError::Invalid(e.to_string()))
}

impl Service {
    pub fn new(cfg: ServiceConfig) -> Self {
        Service {
            cfg,
            sessions: RwLock::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn registry(&self) -> &AppConfig {
        &self.cfg.registry
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.sessions
            .read()
            .expect("sessions poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn list(&self) -> Vec<Descriptor> {
        self.sessions.read().expect("sessions poisoned").values().map(|s| s.descriptor()).collect()
    }

    /// Builds the scene, opens the log and publishes the initial snapshot
    /// as seq 1.
    pub fn create(&self, req: &CreateRequest) -> Result<Arc<Session>, ServiceError> {
        let reg = &self.cfg.registry;
        let task = req
            .task
            .as_deref()
            .map(|id| reg.task(id).map_err(|e| ServiceError::Invalid(e.to_string())))
            .transpose()?;
        let scenario = match (&req.scenario, task) {
            (Some(v), _) => parse_scenario(v)?,
            (None, Some(t)) => t.scene,
            (None, None) => return Err(ServiceError::Invalid("scenario or task is required".into())),
        };
        if let Some(t) = task {
            if t.scene != scenario {
                return Err(ServiceError::Invalid(format!("task {} runs on scenario {}", t.id, t.scene)));
            }
        }
        if !(0.0..=1.0).contains(&req.fail_prob) {
            return Err(ServiceError::Invalid("fail_prob must lie in [0, 1]".into()));
        }
        let subs = task.map(|t| t.substitutions.clone()).unwrap_or_default();
        let scene = reg
            .make_scene(scenario, req.seed, &subs)
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;

        let mut sessions = self.sessions.write().expect("sessions poisoned");
        let open = sessions.values().filter(|s| s.state() != SessionState::Closed).count();
        if open >= self.cfg.capacity {
            return Err(ServiceError::Capacity(self.cfg.capacity));
        }
        let id = format!("s{:04}", self.counter.fetch_add(1, Ordering::Relaxed) + 1);
        let path = self.cfg.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")));
        let log = EventLog::create(path.as_deref(), self.cfg.clock).map_err(|e| ServiceError::Log(e.to_string()))?;
        let session = Arc::new(Session {
            id: id.clone(),
            scenario,
            seed: req.seed,
            mode: req.mode.unwrap_or(Mode::Full),
            fail_prob: req.fail_prob,
            task: task.map(|t| t.id.clone()),
            state: Mutex::new(SessionState::Idle),
            scene: Mutex::new(scene.clone()),
            snapshot: Mutex::new((0, Value::Null)),
            log,
        });
        session.publish(EventBody::SceneSnapshot {
            scene: canonical_value(&scene).expect("scenes serialize"),
        });
        session.set_state(SessionState::AwaitingInstruction);
        sessions.insert(id, session.clone());
        Ok(session)
    }

    /// Fails fast when the session cannot take an instruction now.
    pub fn check_ready(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        let s = self.get(id)?;
        match s.state() {
            SessionState::AwaitingInstruction => Ok(s),
            SessionState::Closed => Err(ServiceError::Closed),
            st => Err(ServiceError::Busy(st)),
        }
    }

    /// Transcribes an uploaded segment. The clip is treated as a microphone
    /// capture: the first second calibrates the threshold, and trailing
    /// silence is appended so a final utterance is confirmed.
    pub fn transcribe(&self, samples: &[f32], sample_rate: u32) -> Result<String, ServiceError> {
        let asr = self.cfg.asr.as_ref().ok_or(ServiceError::NoAsr)?;
        let vad = VadConfig {
            sample_rate,
            ..self.cfg.registry.vad.clone()
        };
        vad.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let mut padded = samples.to_vec();
        padded.extend(std::iter::repeat_n(0.0, vad.end_frames() * vad.frame_len()));
        let segments = Vad::run(&vad, &padded).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let first = segments.into_iter().next().ok_or(ServiceError::NoSpeech)?;
        asr.transcribe(&first.audio, sample_rate)
            .map_err(|e| ServiceError::Speech(e.to_string()))
    }

    /// Claims the session and returns the seq its instruction event will get.
    pub fn begin(&self, id: &str) -> Result<(Arc<Session>, u64), ServiceError> {
        let s = self.get(id)?;
        s.claim()?;
        let next = s.log.head().seq + 1;
        Ok((s, next))
    }

    /// Runs one episode to completion on the calling thread. The session
    /// must have been claimed with [`Service::begin`].
    pub fn run(&self, session: &Session, text: &str, spoken: bool) {
        let reg = &self.cfg.registry;
        let task = reg
            .task_by_instruction(text)
            .filter(|t| t.scene == session.scenario)
            .map(|t| TaskSpec {
                instruction: text.trim().to_string(),
                ..t.clone()
            })
            .unwrap_or_else(|| TaskSpec::ad_hoc(text.trim(), session.scenario));
        let profile = PromptProfile::builtin(if task.prompted {
            ProfileKind::Prompted
        } else {
            ProfileKind::Unprompted
        });
        let scene = session.scene.lock().expect("scene poisoned").clone();
        let detector = Arc::new(OracleDetector {
            degradation: tabletop_core::perception::DetectorDegradation {
                seed: rng::mix(reg.perception.degradation.seed, session.seed),
                ..reg.perception.degradation.clone()
            },
            occluded_confidence: reg.perception.occluded_confidence,
        });
        let mut sink = StageSink { session };
        match SimExecutor::with_detector(reg, scene, session.fail_prob, detector) {
            Ok(mut exec) => {
                let env = AgentEnv {
                    backends: &self.cfg.backends,
                    profile: &profile,
                    config: session.mode.loop_config(self.cfg.base_loop),
                    tts: self.cfg.tts.as_deref(),
                    spoken,
                };
                // A fatal backend error has already been logged as an event.
                let _ = run_episode(&env, &task, &mut exec, &mut sink);
                *session.scene.lock().expect("scene poisoned") = exec.scene;
            }
            Err(e) => {
                sink.emit(EventBody::Error {
                    stage: "executor".into(),
                    message: e.to_string(),
                });
            }
        }
        session.set_state(SessionState::AwaitingInstruction);
    }

    /// Closes a session that is not running an episode. Its history stays
    /// readable.
    pub fn close(&self, id: &str) -> Result<Descriptor, ServiceError> {
        let s = self.get(id)?;
        {
            let mut st = s.state.lock().expect("state poisoned");
            if st.is_busy() {
                return Err(ServiceError::Busy(*st));
            }
            *st = SessionState::Closed;
        }
        s.log.close();
        Ok(s.descriptor())
    }
}
