//! Deterministic rule-based stand-ins for the three model stages.
//!
//! The mocks read the same rendered prompts a real model would see and
//! answer from the registry and the scene evidence embedded in them, so the
//! full loop runs hermetically.

use std::sync::Arc;

use regex::Regex;

use super::backend::{BackendError, Capabilities, ChatRequest, ModelBackend};
use super::prompt::{extract_scene, last_field};
use crate::config::AppConfig;
use crate::scene::{check_goal, oracle_plan, Category, OracleMove, OracleTarget, Scene};

/// Reply used when the mock cannot produce a plan.
pub const NO_PLAN_REPLY: &str = "I am not able to plan this request.";

fn put_regex() -> Regex {
    Regex::new(r"(?i)^(?:put|place|move) the (.+?) (?:on|in|into|onto) the (.+?)\.?$").expect("static regex")
}

/// Step text for one oracle move.
pub fn step_text(scene: &Scene, mv: &OracleMove) -> String {
    let pick = scene.label_of(&mv.pick).unwrap_or(mv.pick.as_str());
    let place = match &mv.target {
        OracleTarget::Container(id) | OracleTarget::Object(id) => scene.label_of(id).unwrap_or(id.as_str()),
        OracleTarget::Table => "table",
    };
    format!("put the {pick} on the {place}")
}

/// Numbered plan text for a list of steps.
pub fn numbered(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Plans registered tasks with the oracle planner over the scene evidence.
/// Without evidence it plans against the task's reference roster (seed 0).
pub struct RulePlanner {
    registry: Arc<AppConfig>,
    vision: bool,
}

impl RulePlanner {
    pub fn new(registry: Arc<AppConfig>) -> Self {
        RulePlanner { registry, vision: true }
    }

    pub fn vision(mut self, on: bool) -> Self {
        self.vision = on;
        self
    }

    fn reply(&self, prompt: &str) -> String {
        let Some(instruction) = last_field(prompt, "Instruction:") else {
            return NO_PLAN_REPLY.into();
        };
        let Some(task) = self.registry.task_by_instruction(instruction) else {
            return match put_regex().captures(instruction) {
                Some(c) => format!("1. put the {} on the {}", &c[1], &c[2]),
                None => NO_PLAN_REPLY.into(),
            };
        };
        let scene = match extract_scene(prompt) {
            Some(s) => s,
            None => match self.registry.make_task_scene(task, 0) {
                Ok(s) => s,
                Err(_) => return NO_PLAN_REPLY.into(),
            },
        };
        match oracle_plan(&scene, &task.goal) {
            Ok(moves) if moves.is_empty() => "1. task complete".into(),
            Ok(moves) => {
                let steps: Vec<String> = moves.iter().map(|m| step_text(&scene, m)).collect();
                format!("Here is the plan.\n{}", numbered(&steps))
            }
            Err(_) => NO_PLAN_REPLY.into(),
        }
    }
}

impl ModelBackend for RulePlanner {
    fn name(&self) -> &str {
        "mock://rules/planner"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            vision: self.vision,
        }
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        Ok(self.reply(request.prompt()))
    }
}

/// Maps a step to a call by template.
///
/// * `put the X on the Y` becomes `vlamove(pick="X", place="Y")`.
/// * `task complete` becomes `done()`.
/// * `<instruction> (object: X)` (planner disabled) moves X to the container
///   named in the clause that mentions X or its category, and answers
///   `done()` when no clause applies or X is explicitly excluded.
pub struct RuleConverter {
    registry: Arc<AppConfig>,
}

impl RuleConverter {
    pub fn new(registry: Arc<AppConfig>) -> Self {
        RuleConverter { registry }
    }

    /// The call text for one step, without fencing.
    pub fn convert_step(&self, step: &str) -> String {
        let step = step.trim();
        if step.eq_ignore_ascii_case("task complete") || step.eq_ignore_ascii_case("task complete.") {
            return "done()".into();
        }
        let object_re = Regex::new(r"^(.*) \(object: (.+)\)$").expect("static regex");
        if let Some(c) = object_re.captures(step) {
            return self.direct(&c[1], &c[2]);
        }
        match put_regex().captures(step) {
            Some(c) => format!("vlamove(pick=\"{}\", place=\"{}\")", &c[1], &c[2]),
            None => "I do not know which skill fits this step.".into(),
        }
    }

    fn category_of(&self, label: &str) -> Option<Category> {
        self.registry
            .catalog
            .iter()
            .find(|e| e.label.eq_ignore_ascii_case(label))
            .map(|e| e.category)
    }

    fn direct(&self, instruction: &str, object: &str) -> String {
        let lower = instruction.to_lowercase();
        let object_l = object.to_lowercase();
        let category = self.category_of(object);
        let mut synonyms_of_object = vec![object_l.clone()];
        for (k, v) in &self.registry.synonyms {
            if v.eq_ignore_ascii_case(object) {
                synonyms_of_object.push(k.to_lowercase());
            }
        }
        for clause in lower.split(" and ") {
            let (body, excluded) = match ["excluding", "except", " but "]
                .iter()
                .filter_map(|w| clause.find(w))
                .min()
            {
                Some(i) => (&clause[..i], &clause[i..]),
                None => (clause, ""),
            };
            if synonyms_of_object.iter().any(|s| excluded.contains(s.as_str())) {
                return "done()".into();
            }
            let mentioned = synonyms_of_object.iter().any(|s| body.contains(s.as_str()))
                || category.is_some_and(|c| mentions_category(body, c));
            if !mentioned {
                continue;
            }
            let dest = self
                .registry
                .containers
                .iter()
                .filter(|c| body.contains(&c.label.to_lowercase()))
                .max_by_key(|c| (c.label.len(), std::cmp::Reverse(c.label.clone())));
            if let Some(d) = dest {
                return format!("vlamove(pick=\"{object}\", place=\"{}\")", d.label);
            }
        }
        "done()".into()
    }
}

fn mentions_category(text: &str, c: Category) -> bool {
    if ["everything", "all items", "all objects"].iter().any(|w| text.contains(w)) {
        return true;
    }
    let words: &[&str] = match c {
        Category::Fruit => &["fruit"],
        Category::Snack => &["snack"],
        Category::Tool => &["tool"],
        Category::DailyItem => &["daily"],
        Category::Block => &["block"],
        Category::Letter => &["letter", "block"],
        Category::Container => &[],
    };
    words.iter().any(|w| text.contains(w))
}

impl ModelBackend for RuleConverter {
    fn name(&self) -> &str {
        "mock://rules/converter"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { text: true, vision: false }
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let step = last_field(request.prompt(), "Step:").unwrap_or("");
        Ok(format!("```\n{}\n```", self.convert_step(step)))
    }
}

/// Judges the evidence scene against the registered goal whose end-state
/// description appears in the prompt.
pub struct RuleEvaluator {
    registry: Arc<AppConfig>,
    vision: bool,
}

impl RuleEvaluator {
    pub fn new(registry: Arc<AppConfig>) -> Self {
        RuleEvaluator { registry, vision: true }
    }

    pub fn vision(mut self, on: bool) -> Self {
        self.vision = on;
        self
    }

    fn reply(&self, prompt: &str) -> String {
        let goal_state = last_field(prompt, "Desired end state:").unwrap_or("");
        let Some(task) = self.registry.task_by_goal_state(goal_state) else {
            return "SUCCESS\nNo checkable condition is attached to this request.".into();
        };
        let Some(scene) = extract_scene(prompt) else {
            return "FAILURE\nNo scene observation was provided.".into();
        };
        let v = check_goal(&scene, &task.goal);
        if v.satisfied {
            "SUCCESS\nThe scene matches the desired end state.".into()
        } else {
            format!("FAILURE\n{}", v.unmet.first().map_or("goal not met", String::as_str))
        }
    }
}

impl ModelBackend for RuleEvaluator {
    fn name(&self) -> &str {
        "mock://rules/evaluator"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            vision: self.vision,
        }
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        Ok(self.reply(request.prompt()))
    }
}
