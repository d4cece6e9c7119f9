//! Trial runner, metrics and report emission.
//!
//! A suite runs every (mode, task, trial) triple with seed `seed_base + trial`.
//! Rates are percentages; aggregates are arithmetic means of per-task rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::mock::RuleConverter;
use crate::agent::{
    parse_skill_call, run_episode, AgentEnv, Backends, Executor, LoopConfig, Outcome, Plan, PromptProfile, SkillCall,
};
use crate::config::{AppConfig, TaskCategory, TaskSpec};
use crate::events::{Clock, EventBody, JsonlSink, SessionEvent, VecSink};
use crate::perception::{DetectorDegradation, OracleDetector};
use crate::rng;
use crate::scene::{canonical_json, check_goal, GoalVerdict, Scene};
use crate::skills::{SimExecutor, SkillStatus};

/// Agent configurations compared by the suite. They differ only in
/// [`LoopConfig`] switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    /// Planner without scene evidence, no evaluator.
    Baseline,
    NoPlanner,
    NoEvaluator,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::Baseline, Mode::NoPlanner, Mode::NoEvaluator];

    pub fn id(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Baseline => "baseline",
            Mode::NoPlanner => "no_planner",
            Mode::NoEvaluator => "no_evaluator",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Mode::Full => "Full agent",
            Mode::Baseline => "LLM baseline",
            Mode::NoPlanner => "w/o Planner",
            Mode::NoEvaluator => "w/o Evaluator",
        }
    }

    /// `base` with this mode's switches applied.
    pub fn loop_config(self, base: LoopConfig) -> LoopConfig {
        match self {
            Mode::Full => base,
            Mode::Baseline => LoopConfig {
                planner_vision_enabled: false,
                evaluator_enabled: false,
                ..base
            },
            Mode::NoPlanner => LoopConfig {
                planner_enabled: false,
                ..base
            },
            Mode::NoEvaluator => LoopConfig {
                evaluator_enabled: false,
                ..base
            },
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected full, baseline, no_planner or no_evaluator)"))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("suite has no {0}")]
    Empty(&'static str),
    #[error("fail_prob {0} not in [0, 1]")]
    FailProb(f64),
    #[error("invalid degradation: {0}")]
    Degradation(String),
    #[error("cannot build scene for {task}: {message}")]
    Scene { task: String, message: String },
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub modes: Vec<Mode>,
    /// Task ids in report order.
    pub tasks: Vec<String>,
    pub trials: u32,
    pub seed_base: u64,
    pub fail_prob: f64,
    pub degradation: DetectorDegradation,
    pub base_loop: LoopConfig,
    /// When set, each episode is logged to `<log_dir>/<mode>/<task>-<trial>.jsonl`.
    pub log_dir: Option<PathBuf>,
}

impl SuiteConfig {
    /// Every sim task of the registry, full mode, registry defaults.
    pub fn from_registry(reg: &AppConfig) -> Self {
        SuiteConfig {
            modes: vec![Mode::Full],
            tasks: reg.sim_tasks().map(|t| t.id.clone()).collect(),
            trials: reg.bench.trials,
            seed_base: reg.bench.seed_base,
            fail_prob: reg.bench.fail_prob,
            degradation: reg.perception.degradation.clone(),
            base_loop: LoopConfig::from_agent(&reg.agent),
            log_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: String,
    pub mode: Mode,
    pub trial: u32,
    pub seed: u64,
    pub attempts: u32,
    pub verdict: Outcome,
    /// Ground-truth goal check on the final scene.
    pub success: bool,
    pub partial: f64,
    /// Whether the first plan passes perfect-execution simulation.
    pub planning_ok: Option<bool>,
    /// Set when the episode aborted on a backend error.
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub scene: String,
    pub category: TaskCategory,
    pub instruction: String,
    pub prompted: bool,
    pub sim: bool,
    pub trials: u32,
    /// Full-mode planning success rate.
    pub planning_rate: Option<f64>,
    pub success: BTreeMap<Mode, f64>,
    pub partial: BTreeMap<Mode, f64>,
}

/// Means over one group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: Group,
    pub tasks: usize,
    pub planning_rate: Option<f64>,
    pub success: BTreeMap<Mode, f64>,
    pub partial: BTreeMap<Mode, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Prompted,
    Unprompted,
    Real,
}

impl Group {
    pub fn of(task: &TaskRow) -> Group {
        match (task.sim, task.prompted) {
            (false, _) => Group::Real,
            (true, true) => Group::Prompted,
            (true, false) => Group::Unprompted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub modes: Vec<Mode>,
    pub trials: u32,
    pub seed_base: u64,
    pub fail_prob: f64,
    /// False when some episode aborted on a backend error.
    pub complete: bool,
    pub rows: Vec<TaskRow>,
    pub aggregates: Vec<Aggregate>,
    pub records: Vec<TrialRecord>,
}

/// Percentage of `hits` over `n`.
pub fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Partial credit: 1 when the goal holds, 0.25 when at least one `vlamove`
/// completed, otherwise 0.
pub fn score_partial(events: &[SessionEvent], ground_truth: Option<&GoalVerdict>) -> f64 {
    if ground_truth.is_some_and(|g| g.satisfied) {
        return 1.0;
    }
    let moves: Vec<(u32, usize)> = events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::SkillCall {
                attempt,
                index,
                call: SkillCall::Vlamove { .. },
                ..
            } => Some((*attempt, *index)),
            _ => None,
        })
        .collect();
    let moved = events.iter().any(|e| match &e.body {
        EventBody::StepResult {
            attempt,
            index,
            status: SkillStatus::Ok,
            ..
        } => moves.contains(&(*attempt, *index)),
        _ => false,
    });
    if moved {
        0.25
    } else {
        0.0
    }
}

/// Whether `plan` reaches the task goal when executed perfectly from `scene`.
///
/// Steps go through the rule converter and a zero-noise executor on a copy
/// of the scene. An unconvertible step or an empty plan is a failure.
pub fn planning_success(registry: &Arc<AppConfig>, plan: &Plan, task: &TaskSpec, scene: &Scene) -> bool {
    if plan.steps.is_empty() || task.goal.is_empty() {
        return false;
    }
    let converter = RuleConverter::new(registry.clone());
    let detector = Arc::new(OracleDetector {
        degradation: DetectorDegradation::default(),
        occluded_confidence: registry.perception.occluded_confidence,
    });
    let Ok(mut exec) = SimExecutor::with_detector(registry, scene.clone(), 0.0, detector) else {
        return false;
    };
    for step in &plan.steps {
        let Ok(call) = parse_skill_call(&converter.convert_step(step)) else {
            return false;
        };
        if call == SkillCall::Done {
            break;
        }
        exec.execute(&call);
    }
    check_goal(&exec.scene, &task.goal).satisfied
}

fn run_trial(
    registry: &Arc<AppConfig>,
    backends: &Backends,
    profile: &PromptProfile,
    cfg: &SuiteConfig,
    task: &TaskSpec,
    mode: Mode,
    trial: u32,
) -> Result<TrialRecord, BenchError> {
    let started = Instant::now();
    let seed = cfg.seed_base + trial as u64;
    let scene = registry.make_task_scene(task, seed).map_err(|e| BenchError::Scene {
        task: task.id.clone(),
        message: e.to_string(),
    })?;
    let initial = scene.clone();
    let detector = Arc::new(OracleDetector {
        degradation: DetectorDegradation {
            seed: rng::mix(cfg.degradation.seed, seed),
            ..cfg.degradation.clone()
        },
        occluded_confidence: registry.perception.occluded_confidence,
    });
    let mut exec = SimExecutor::with_detector(registry, scene, cfg.fail_prob, detector).map_err(|e| BenchError::Scene {
        task: task.id.clone(),
        message: e.to_string(),
    })?;
    let env = AgentEnv {
        backends,
        profile,
        config: mode.loop_config(cfg.base_loop),
        tts: None,
        spoken: false,
    };
    let (result, events) = match &cfg.log_dir {
        Some(dir) => {
            let path = log_path(dir, mode, &task.id, trial);
            match JsonlSink::create(&path, Clock::Logical) {
                Ok(mut sink) => {
                    let r = run_episode(&env, task, &mut exec, &mut sink);
                    let error = sink.error.take().map(|e| e.to_string());
                    let events = sink.events().to_vec();
                    (r.map_err(|e| e.to_string()).and_then(|r| error.map_or(Ok(r), Err)), events)
                }
                Err(e) => (Err(e.to_string()), vec![]),
            }
        }
        None => {
            let mut sink = VecSink::new(Clock::Logical);
            let r = run_episode(&env, task, &mut exec, &mut sink);
            (r.map_err(|e| e.to_string()), sink.events)
        }
    };
    let record = match result {
        Ok(r) => {
            let planning_ok = (mode == Mode::Full)
                .then(|| r.plans.first().is_some_and(|p| planning_success(registry, p, task, &initial)));
            TrialRecord {
                task_id: task.id.clone(),
                mode,
                trial,
                seed,
                attempts: r.attempts,
                verdict: r.final_verdict.outcome,
                success: r.ground_truth.as_ref().is_some_and(|g| g.satisfied),
                partial: score_partial(&events, r.ground_truth.as_ref()),
                planning_ok,
                error: None,
                wall_ms: 0,
            }
        }
        Err(error) => TrialRecord {
            task_id: task.id.clone(),
            mode,
            trial,
            seed,
            attempts: 0,
            verdict: Outcome::Failure,
            success: false,
            partial: score_partial(&events, None),
            planning_ok: (mode == Mode::Full).then_some(false),
            error: Some(error),
            wall_ms: 0,
        },
    };
    Ok(TrialRecord {
        wall_ms: started.elapsed().as_millis() as u64,
        ..record
    })
}

/// Log file of one episode.
pub fn log_path(dir: &Path, mode: Mode, task_id: &str, trial: u32) -> PathBuf {
    dir.join(mode.id()).join(format!("{task_id}-{trial:03}.jsonl"))
}

/// Runs the suite. Trials run in parallel; records come back in
/// (mode, task, trial) order.
pub fn run_suite(
    registry: &Arc<AppConfig>,
    backends: &Backends,
    profile: &PromptProfile,
    cfg: &SuiteConfig,
) -> Result<BenchmarkReport, BenchError> {
    if cfg.modes.is_empty() {
        return Err(BenchError::Empty("modes"));
    }
    if cfg.tasks.is_empty() {
        return Err(BenchError::Empty("tasks"));
    }
    if cfg.trials == 0 {
        return Err(BenchError::Empty("trials"));
    }
    if !(0.0..=1.0).contains(&cfg.fail_prob) {
        return Err(BenchError::FailProb(cfg.fail_prob));
    }
    cfg.degradation
        .validate()
        .map_err(|e| BenchError::Degradation(e.to_string()))?;
    let tasks: Vec<&TaskSpec> = cfg
        .tasks
        .iter()
        .map(|id| registry.task(id).map_err(|_| BenchError::UnknownTask(id.clone())))
        .collect::<Result<_, _>>()?;
    if let Some(dir) = &cfg.log_dir {
        // Logs are append-only; start each run from empty files.
        for m in &cfg.modes {
            for t in &tasks {
                for trial in 0..cfg.trials {
                    let _ = std::fs::remove_file(log_path(dir, *m, &t.id, trial));
                }
            }
        }
    }
    let jobs: Vec<(Mode, &TaskSpec, u32)> = cfg
        .modes
        .iter()
        .flat_map(|m| tasks.iter().flat_map(move |t| (0..cfg.trials).map(move |i| (*m, *t, i))))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(m, t, i)| run_trial(registry, backends, profile, cfg, t, *m, *i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_report(registry, cfg, records))
}

/// Assembles the report from raw records. Pure; rerunning it on
/// `report.records` reproduces the report.
pub fn build_report(registry: &AppConfig, cfg: &SuiteConfig, records: Vec<TrialRecord>) -> BenchmarkReport {
    let mut rows = Vec::new();
    for id in &cfg.tasks {
        let Ok(task) = registry.task(id) else { continue };
        let mut row = TaskRow {
            task_id: task.id.clone(),
            scene: task.scene.to_string(),
            category: task.category,
            instruction: task.instruction.clone(),
            prompted: task.prompted,
            sim: task.is_sim(),
            trials: cfg.trials,
            planning_rate: None,
            success: BTreeMap::new(),
            partial: BTreeMap::new(),
        };
        for m in &cfg.modes {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| &r.task_id == id && r.mode == *m).collect();
            row.success.insert(*m, rate(rs.iter().filter(|r| r.success).count(), rs.len()));
            row.partial
                .insert(*m, 100.0 * mean(&rs.iter().map(|r| r.partial).collect::<Vec<_>>()));
            if *m == Mode::Full {
                let planned: Vec<bool> = rs.iter().filter_map(|r| r.planning_ok).collect();
                row.planning_rate = Some(rate(planned.iter().filter(|p| **p).count(), planned.len()));
            }
        }
        rows.push(row);
    }
    let mut aggregates = Vec::new();
    for group in [Group::Prompted, Group::Unprompted, Group::Real] {
        let members: Vec<&TaskRow> = rows.iter().filter(|r| Group::of(r) == group).collect();
        if members.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&TaskRow) -> Option<f64>| {
            let v: Vec<f64> = members.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| mean(&v))
        };
        let mut agg = Aggregate {
            group,
            tasks: members.len(),
            planning_rate: col(&|r| r.planning_rate),
            success: BTreeMap::new(),
            partial: BTreeMap::new(),
        };
        for m in &cfg.modes {
            agg.success.insert(*m, col(&|r| r.success.get(m).copied()).unwrap_or(0.0));
            agg.partial.insert(*m, col(&|r| r.partial.get(m).copied()).unwrap_or(0.0));
        }
        aggregates.push(agg);
    }
    BenchmarkReport {
        modes: cfg.modes.clone(),
        trials: cfg.trials,
        seed_base: cfg.seed_base,
        fail_prob: cfg.fail_prob,
        complete: records.iter().all(|r| r.error.is_none()),
        rows,
        aggregates,
        records,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}` (expected markdown, csv or json)")),
        }
    }
}

/// Percentage text: at most two decimals, trailing zeros dropped.
pub fn fmt_pct(v: f64) -> String {
    let s = format!("{:.2}", (v * 100.0).round() / 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{}%", if s == "-0" { "0" } else { s })
}

fn num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r}")
}

fn group_title(g: Group) -> &'static str {
    match g {
        Group::Prompted => "Prompted Tasks Total",
        Group::Unprompted => "Unprompted Tasks Total",
        Group::Real => "Total",
    }
}

fn markdown(r: &BenchmarkReport) -> String {
    let mut out = String::new();
    let agg = |g: Group| r.aggregates.iter().find(|a| a.group == g);
    let sim_rows: Vec<&TaskRow> = r.rows.iter().filter(|x| x.sim).collect();
    let plan_cell = |v: Option<f64>| v.map_or("n/a".to_string(), fmt_pct);
    let success_cells = |m: &BTreeMap<Mode, f64>| r.modes.iter().map(|k| fmt_pct(m[k])).collect::<Vec<_>>().join(" | ");
    let _ = writeln!(
        out,
        "# Benchmark report\n\nTrials per task: {}. Seeds {}..{}. Grasp failure probability: {}.{}\n",
        r.trials,
        r.seed_base,
        r.seed_base + r.trials as u64 - 1,
        num(r.fail_prob),
        if r.complete { "" } else { " INCOMPLETE: some episodes aborted on backend errors." }
    );
    let header = |out: &mut String, first: &str| {
        let titles: Vec<&str> = r.modes.iter().map(|m| m.title()).collect();
        let _ = writeln!(out, "| {first} | {} |", titles.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(first.matches('|').count() + 1 + r.modes.len()));
    };
    if !sim_rows.is_empty() {
        out.push_str("## Simulation tasks (success rate)\n\n");
        header(&mut out, "Scene | Type of Task | Task | Planning Success Rate");
        for g in [Group::Prompted, Group::Unprompted] {
            let rows: Vec<&&TaskRow> = sim_rows.iter().filter(|x| Group::of(x) == g).collect();
            if rows.is_empty() {
                continue;
            }
            for x in rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    x.scene,
                    x.category.title(),
                    x.instruction,
                    plan_cell(x.planning_rate),
                    success_cells(&x.success)
                );
            }
            if let Some(a) = agg(g) {
                let _ = writeln!(
                    out,
                    "|  |  | **{}** | {} | {} |",
                    group_title(g),
                    plan_cell(a.planning_rate),
                    success_cells(&a.success)
                );
            }
        }
        out.push('\n');
    }
    let real: Vec<&TaskRow> = r.rows.iter().filter(|x| !x.sim).collect();
    if !real.is_empty() {
        out.push_str("## Real-task analogs (success rate)\n\nSimulator analogs; not comparable to physical trials.\n\n");
        header(&mut out, "Task");
        for x in real {
            let _ = writeln!(out, "| {} | {} |", x.instruction, success_cells(&x.success));
        }
        if let Some(a) = agg(Group::Real) {
            let _ = writeln!(out, "| **Total** | {} |", success_cells(&a.success));
        }
        out.push('\n');
    }
    let ablation = [Mode::NoPlanner, Mode::NoEvaluator, Mode::Full];
    if ablation.iter().all(|m| r.modes.contains(m)) {
        out.push_str("## Ablation (average partial-credit score)\n\n");
        let _ = writeln!(
            out,
            "|  | {} |\n|---|---|---|---|",
            ablation.iter().map(|m| m.title()).collect::<Vec<_>>().join(" | ")
        );
        for (g, label) in [(Group::Prompted, "Ten Prompted Tasks"), (Group::Unprompted, "Ten Unprompted Tasks")] {
            if let Some(a) = agg(g) {
                let cells: Vec<String> = ablation.iter().map(|m| fmt_pct(a.partial[m])).collect();
                let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
            }
        }
        out.push('\n');
    }
    out
}

fn csv(r: &BenchmarkReport) -> String {
    let mut out = String::from("row,group,scene,category,task,planning_rate");
    for m in &r.modes {
        let _ = write!(out, ",{0}_success,{0}_partial", m.id());
    }
    out.push('\n');
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    let cells = |out: &mut String, p: Option<f64>, s: &BTreeMap<Mode, f64>, q: &BTreeMap<Mode, f64>| {
        let _ = write!(out, ",{}", p.map_or(String::new(), num));
        for m in &r.modes {
            let _ = write!(out, ",{},{}", num(s[m]), num(q[m]));
        }
        out.push('\n');
    };
    for x in &r.rows {
        let group = match Group::of(x) {
            Group::Prompted => "prompted",
            Group::Unprompted => "unprompted",
            Group::Real => "real",
        };
        let _ = write!(
            out,
            "{},{group},{},{},{}",
            x.task_id,
            x.scene,
            quote(x.category.title()),
            quote(&x.instruction)
        );
        cells(&mut out, x.planning_rate, &x.success, &x.partial);
    }
    for a in &r.aggregates {
        let id = serde_json::to_value(a.group).expect("group serializes");
        let _ = write!(out, "total,{},,,{}", id.as_str().unwrap_or(""), quote(group_title(a.group)));
        cells(&mut out, a.planning_rate, &a.success, &a.partial);
    }
    out
}

/// Renders the report. Equal reports give byte-identical output.
pub fn emit_report(report: &BenchmarkReport, format: Format) -> String {
    match format {
        Format::Markdown => markdown(report),
        Format::Csv => csv(report),
        Format::Json => {
            let mut s = canonical_json(report).expect("reports serialize");
            s.push('\n');
            s
        }
    }
}
