//! The single structured registry document: catalog, scenario rosters, task
//! registry and every tunable threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::ArmConfig;
use crate::perception::{CameraModel, DetectorDegradation};
use crate::scene::{
    self, CatalogEntry, ContainerDef, GoalPredicate, GoalVerdict, ScenarioDef, ScenarioKey, Scene, SimError, SimParams,
};
use crate::speech::VadConfig;

/// The registry shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Stacking,
    BlocksBowls,
    FruitPlacement,
    SnackDaily,
    ToolPacking,
    Mixed,
}

impl TaskCategory {
    /// Display name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            TaskCategory::Stacking => "Stacking",
            TaskCategory::BlocksBowls => "Blocks and Bowls",
            TaskCategory::FruitPlacement => "Fruit Placement",
            TaskCategory::SnackDaily => "Snack and Daily Item",
            TaskCategory::ToolPacking => "Tool Packing",
            TaskCategory::Mixed => "Mixed Category",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub scene: ScenarioKey,
    pub category: TaskCategory,
    pub prompted: bool,
    pub instruction: String,
    /// End-state description handed to the evaluator.
    pub goal_state: String,
    pub goal: Vec<GoalPredicate>,
    /// Roster label swaps applied when building this task's scene.
    #[serde(default)]
    pub substitutions: BTreeMap<String, String>,
}

impl TaskSpec {
    /// Task for an instruction outside the registry. It has no checkable goal.
    pub fn ad_hoc(instruction: &str, scene: ScenarioKey) -> Self {
        TaskSpec {
            id: "ad-hoc".into(),
            scene,
            category: TaskCategory::Mixed,
            prompted: false,
            instruction: instruction.to_string(),
            goal_state: format!("The request \"{instruction}\" has been carried out."),
            goal: vec![],
            substitutions: BTreeMap::new(),
        }
    }

    pub fn is_sim(&self) -> bool {
        matches!(self.scene, ScenarioKey::Sim(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionConfig {
    pub overlap_threshold: f64,
    pub occluded_confidence: f64,
    pub degradation: DetectorDegradation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub max_attempts: u32,
    pub parse_retries: u32,
    pub failure_context_events: usize,
    /// Backend URIs: `mock://rules`, `mock://rules-text` or an `http(s)://` endpoint.
    pub planner: String,
    pub converter: String,
    pub evaluator: String,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: u32,
    pub seed_base: u64,
    pub fail_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub sim: SimParams,
    pub camera: CameraModel,
    pub arm: ArmConfig,
    pub perception: PerceptionConfig,
    pub agent: AgentConfig,
    pub vad: VadConfig,
    pub bench: BenchConfig,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    pub catalog: Vec<CatalogEntry>,
    pub containers: Vec<ContainerDef>,
    pub scenarios: BTreeMap<String, ScenarioDef>,
    pub tasks: Vec<TaskSpec>,
}

impl AppConfig {
    /// The shipped registry. Panics only if the embedded file is broken,
    /// which the test suite rules out.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("embedded default config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.camera.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.arm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.vad.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.perception
            .degradation
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.agent.max_attempts == 0 {
            return invalid("agent.max_attempts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.bench.fail_prob) {
            return invalid("bench.fail_prob must lie in [0, 1]".into());
        }
        let mut labels = BTreeSet::new();
        for entry in &self.catalog {
            entry.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !labels.insert(entry.label.to_lowercase()) {
                return invalid(format!("duplicate catalog label `{}`", entry.label));
            }
        }
        for c in &self.containers {
            if !labels.insert(c.label.to_lowercase()) {
                return invalid(format!("container label `{}` collides with another label", c.label));
            }
            if c.capacity <= 0.0 || c.radius <= 0.0 {
                return invalid(format!("container `{}` needs positive radius and capacity", c.label));
            }
        }
        for key in self.scenarios.keys() {
            key.parse::<ScenarioKey>()
                .map_err(|_| ConfigError::Invalid(format!("bad scenario key `{key}`")))?;
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return invalid(format!("duplicate task id `{}`", t.id));
            }
            if !self.scenarios.contains_key(&t.scene.to_string()) {
                return invalid(format!("task `{}` references missing scenario {}", t.id, t.scene));
            }
            self.make_scene(t.scene, 0, &t.substitutions)
                .map_err(|e| ConfigError::Invalid(format!("task `{}`: {e}", t.id)))?;
        }
        Ok(())
    }

    pub fn catalog_map(&self) -> BTreeMap<String, CatalogEntry> {
        self.catalog.iter().map(|e| (e.label.clone(), e.clone())).collect()
    }

    pub fn container_map(&self) -> BTreeMap<String, ContainerDef> {
        self.containers.iter().map(|c| (c.label.clone(), c.clone())).collect()
    }

    /// One of the ten simulated desktops.
    pub fn make_scenario(&self, scenario_id: u32, seed: u64) -> Result<Scene, SimError> {
        self.make_scene(ScenarioKey::sim(scenario_id)?, seed, &BTreeMap::new())
    }

    pub fn make_scene(
        &self,
        key: ScenarioKey,
        seed: u64,
        substitutions: &BTreeMap<String, String>,
    ) -> Result<Scene, SimError> {
        let def = self
            .scenarios
            .get(&key.to_string())
            .ok_or_else(|| SimError::UnknownScenario(key.to_string()))?;
        scene::build_scene(
            key,
            seed,
            def,
            &self.catalog_map(),
            &self.container_map(),
            &self.sim,
            substitutions,
        )
    }

    /// Initial scene for a registered task.
    pub fn make_task_scene(&self, task: &TaskSpec, seed: u64) -> Result<Scene, SimError> {
        self.make_scene(task.scene, seed, &task.substitutions)
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec, SimError> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| SimError::UnknownTask(id.to_string()))
    }

    /// Registered task whose instruction matches `text` (case and surrounding
    /// whitespace ignored).
    pub fn task_by_instruction(&self, text: &str) -> Option<&TaskSpec> {
        let text = text.trim();
        self.tasks.iter().find(|t| t.instruction.eq_ignore_ascii_case(text))
    }

    pub fn task_by_goal_state(&self, text: &str) -> Option<&TaskSpec> {
        let text = text.trim();
        self.tasks.iter().find(|t| t.goal_state.eq_ignore_ascii_case(text))
    }

    pub fn sim_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.is_sim())
    }

    pub fn real_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| !t.is_sim())
    }

    /// Evaluates a registered task's goal against `scene`.
    pub fn check_goal(&self, scene: &Scene, task_id: &str) -> Result<GoalVerdict, SimError> {
        Ok(scene::check_goal(scene, &self.task(task_id)?.goal))
    }
}
