//! Deterministic 2.5D tabletop world.
//!
//! Objects live on a planar table with integer stacking levels. A single
//! gripper can hold one object at a time; `step_pick` and `step_place` are
//! the only mutators and every state change they make is appended to the
//! scene's event log. All randomness is drawn from a stream keyed by the
//! scene seed and the current tick, so equal action sequences always yield
//! byte-identical scenes.

mod goal;
mod oracle;
mod scenario;
mod snapshot;

pub use goal::{check_goal, Extremum, ExtremumBy, ExtremumPick, GoalPredicate, GoalVerdict, Selector, StackOrder};
pub use oracle::{oracle_plan, OracleMove, OracleTarget, PlanError};
pub use scenario::{CatalogEntry, ContainerDef, LayoutParams, ScenarioDef};
pub(crate) use scenario::build_scene;
pub use snapshot::{canonical_json, canonical_value};

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Identifier shared by objects and containers; unique within a scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn new(s: impl Into<String>) -> Self {
        ItemId(s.into())
    }

    /// Slug id derived from a label ("red plate" -> "red-plate").
    pub fn from_label(label: &str) -> Self {
        let slug: String = label
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
            .collect();
        ItemId(slug)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which scripted desktop a scene was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioKey {
    /// One of the ten simulated desktops.
    Sim(u8),
    /// The office desk hosting the real-world task analogs.
    Real,
}

impl ScenarioKey {
    pub fn sim(id: u32) -> Result<Self, SimError> {
        if (1..=10).contains(&id) {
            Ok(ScenarioKey::Sim(id as u8))
        } else {
            Err(SimError::UnknownScenario(id.to_string()))
        }
    }
}

impl fmt::Display for ScenarioKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioKey::Sim(n) => write!(f, "{n}"),
            ScenarioKey::Real => f.write_str("real"),
        }
    }
}

impl std::str::FromStr for ScenarioKey {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("real") {
            return Ok(ScenarioKey::Real);
        }
        let n: u32 = s.parse().map_err(|_| SimError::UnknownScenario(s.to_string()))?;
        ScenarioKey::sim(n)
    }
}

impl Serialize for ScenarioKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ScenarioKey::Sim(n) => s.serialize_u8(*n),
            ScenarioKey::Real => s.serialize_str("real"),
        }
    }
}

impl<'de> Deserialize<'de> for ScenarioKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(i64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => u32::try_from(n)
                .map_err(|_| SimError::UnknownScenario(n.to_string()))
                .and_then(ScenarioKey::sim)
                .map_err(serde::de::Error::custom),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Fruit,
    Snack,
    DailyItem,
    Tool,
    Block,
    Letter,
    Container,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Pink,
    White,
    Black,
    Brown,
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Cube,
    Triangle,
    Square,
    Pentagon,
    Hexagon,
    Letter,
    Irregular,
}

impl Shape {
    /// Corner/side count implied by a flat polygon shape.
    pub fn polygon_sides(self) -> Option<u32> {
        match self {
            Shape::Triangle => Some(3),
            Shape::Square => Some(4),
            Shape::Pentagon => Some(5),
            Shape::Hexagon => Some(6),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Bowl,
    Plate,
    Box,
}

/// Planar position plus integer stacking level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Workspace {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ItemId,
    pub label: String,
    pub category: Category,
    pub color: Color,
    pub shape: Shape,
    pub corner_count: u32,
    pub side_count: u32,
    pub letter: Option<char>,
    /// Mirror symmetry of the glyph; only meaningful for letter blocks.
    #[serde(default)]
    pub symmetric: bool,
    pub footprint_radius: f64,
    pub height: f64,
    pub pose: Pose,
    pub supported_by: Option<ItemId>,
    pub contained_in: Option<ItemId>,
    pub graspable: bool,
}

impl ObjectInstance {
    pub fn footprint_area(&self) -> f64 {
        std::f64::consts::PI * self.footprint_radius * self.footprint_radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub id: ItemId,
    pub label: String,
    pub kind: ContainerKind,
    pub color: Color,
    /// Maximum summed footprint area of direct contents (m^2).
    pub capacity: f64,
    pub footprint_radius: f64,
    pub x: f64,
    pub y: f64,
    pub contents: Vec<ItemId>,
}

/// Tunable simulator constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub support_ratio: f64,
    pub grasp_jitter_max: f64,
    pub pose_jitter: f64,
    pub free_pose_step: f64,
    pub free_pose_clearance: f64,
    pub workspace: Workspace,
    pub layout: LayoutParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEventKind {
    Picked,
    Placed,
    GraspFailed,
    Displaced,
    Rejected,
    /// Not a state change; emitted by skills for anomalies worth surfacing.
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum EventTarget {
    Item { id: ItemId },
    Pose { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u64,
    pub kind: SimEventKind,
    pub subject: ItemId,
    pub target: Option<EventTarget>,
    pub detail: Option<String>,
}

impl SimEvent {
    /// One-line human readable summary.
    pub fn summary(&self) -> String {
        let kind = match self.kind {
            SimEventKind::Picked => "picked",
            SimEventKind::Placed => "placed",
            SimEventKind::GraspFailed => "grasp_failed",
            SimEventKind::Displaced => "displaced",
            SimEventKind::Rejected => "rejected",
            SimEventKind::Warning => "warning",
        };
        let mut s = format!("[{}] {} {}", self.tick, kind, self.subject);
        match &self.target {
            Some(EventTarget::Item { id }) => s.push_str(&format!(" -> {id}")),
            Some(EventTarget::Pose { x, y }) => s.push_str(&format!(" -> ({x:.3}, {y:.3})")),
            None => {}
        }
        if let Some(d) = &self.detail {
            s.push_str(&format!(" ({d})"));
        }
        s
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("gripper already holds `{0}`")]
    AlreadyHolding(ItemId),
    #[error("gripper is empty")]
    NothingHeld,
    #[error("invalid place target: {0}")]
    InvalidTarget(String),
    #[error("registry error: {0}")]
    Registry(String),
}

/// Where to put the held object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PlaceTarget {
    Container { id: ItemId },
    Object { id: ItemId },
    Pose { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum PickResult {
    Held,
    GraspFailed { x: f64, y: f64 },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum PlaceResult {
    InContainer { id: ItemId, displaced: Vec<ItemId> },
    OnObject { id: ItemId },
    /// Support ratio too small; the object slid to the table beside the target.
    SlidBeside { id: ItemId, x: f64, y: f64 },
    /// Container could not make room; the object went to the table instead.
    Overflowed { id: ItemId, x: f64, y: f64 },
    OnTable { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scenario: ScenarioKey,
    pub objects: BTreeMap<ItemId, ObjectInstance>,
    pub containers: BTreeMap<ItemId, Container>,
    pub workspace: Workspace,
    pub rng_seed: u64,
    pub tick: u64,
    pub held: Option<ItemId>,
    pub event_log: Vec<SimEvent>,
    pub params: SimParams,
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

impl Scene {
    pub fn object(&self, id: &ItemId) -> Option<&ObjectInstance> {
        self.objects.get(id)
    }

    pub fn container(&self, id: &ItemId) -> Option<&Container> {
        self.containers.get(id)
    }

    pub fn object_by_label(&self, label: &str) -> Option<&ObjectInstance> {
        self.objects.values().find(|o| o.label.eq_ignore_ascii_case(label))
    }

    pub fn container_by_label(&self, label: &str) -> Option<&Container> {
        self.containers.values().find(|c| c.label.eq_ignore_ascii_case(label))
    }

    /// Label of an object or container.
    pub fn label_of(&self, id: &ItemId) -> Option<&str> {
        self.objects
            .get(id)
            .map(|o| o.label.as_str())
            .or_else(|| self.containers.get(id).map(|c| c.label.as_str()))
    }

    /// Object resting directly on `id`, if any.
    pub fn object_on(&self, id: &ItemId) -> Option<&ItemId> {
        self.objects
            .values()
            .find(|o| o.supported_by.as_ref() == Some(id))
            .map(|o| &o.id)
    }

    /// Topmost object of the stack that contains `id`.
    pub fn stack_top(&self, id: &ItemId) -> ItemId {
        let mut cur = id.clone();
        // Relation graph is acyclic; the bound guards against corrupted input.
        for _ in 0..=self.objects.len() {
            match self.object_on(&cur) {
                Some(next) => cur = next.clone(),
                None => break,
            }
        }
        cur
    }

    /// Bottom object of the stack that contains `id`.
    pub fn stack_root(&self, id: &ItemId) -> ItemId {
        let mut cur = id.clone();
        for _ in 0..=self.objects.len() {
            match self.objects.get(&cur).and_then(|o| o.supported_by.clone()) {
                Some(next) => cur = next,
                None => break,
            }
        }
        cur
    }

    /// Container holding the object either directly or through the base of its stack.
    pub fn effective_container(&self, id: &ItemId) -> Option<&ItemId> {
        let root = self.stack_root(id);
        self.objects.get(&root).and_then(|o| o.contained_in.as_ref())
    }

    /// Height of the object's top surface above the table (meters).
    pub fn top_height(&self, id: &ItemId) -> f64 {
        let mut h = 0.0;
        let mut cur = Some(id.clone());
        let mut guard = 0;
        while let Some(c) = cur {
            let Some(o) = self.objects.get(&c) else { break };
            h += o.height;
            cur = o.supported_by.clone();
            guard += 1;
            if guard > self.objects.len() {
                break;
            }
        }
        h
    }

    /// True when the supported_by relation has no cycles.
    pub fn support_graph_acyclic(&self) -> bool {
        self.objects.keys().all(|start| {
            let mut cur = self.objects[start].supported_by.clone();
            let mut steps = 0;
            while let Some(c) = cur {
                steps += 1;
                if &c == start || steps > self.objects.len() {
                    return false;
                }
                cur = self.objects.get(&c).and_then(|o| o.supported_by.clone());
            }
            true
        })
    }

    /// Recomputes graspable flags from the support relation.
    pub fn refresh_graspable(&mut self) {
        let covered: std::collections::BTreeSet<ItemId> = self
            .objects
            .values()
            .filter_map(|o| o.supported_by.clone())
            .collect();
        for o in self.objects.values_mut() {
            o.graspable = o.category != Category::Container && !covered.contains(&o.id);
        }
    }

    fn push_event(
        &mut self,
        kind: SimEventKind,
        subject: &ItemId,
        target: Option<EventTarget>,
        detail: Option<String>,
    ) {
        self.tick += 1;
        self.event_log.push(SimEvent {
            tick: self.tick,
            kind,
            subject: subject.clone(),
            target,
            detail,
        });
    }

    /// Appends a warning event without changing world state.
    pub fn warn(&mut self, subject: &ItemId, detail: impl Into<String>) {
        self.push_event(SimEventKind::Warning, subject, None, Some(detail.into()));
    }

    fn used_capacity(&self, container: &Container) -> f64 {
        container
            .contents
            .iter()
            .filter_map(|id| self.objects.get(id))
            .map(ObjectInstance::footprint_area)
            .sum()
    }

    fn detach(&mut self, id: &ItemId) {
        let Some(obj) = self.objects.get_mut(id) else { return };
        obj.supported_by = None;
        let container = obj.contained_in.take();
        obj.pose.z = 0;
        if let Some(cid) = container {
            if let Some(c) = self.containers.get_mut(&cid) {
                c.contents.retain(|x| x != id);
            }
        }
    }

    fn insert_into(&mut self, id: &ItemId, cid: &ItemId) {
        let c = self.containers.get_mut(cid).expect("container checked by caller");
        let slot = c.contents.len() as f64;
        let ring = if slot == 0.0 { 0.0 } else { 0.45 * c.footprint_radius };
        let (x, y) = (
            c.x + ring * (slot * GOLDEN_ANGLE).cos(),
            c.y + ring * (slot * GOLDEN_ANGLE).sin(),
        );
        c.contents.push(id.clone());
        let (x, y) = self.workspace.clamp(x, y);
        let obj = self.objects.get_mut(id).expect("object checked by caller");
        obj.contained_in = Some(cid.clone());
        obj.supported_by = None;
        obj.pose = Pose { x, y, z: 0 };
    }

    fn set_on_table(&mut self, id: &ItemId, x: f64, y: f64) {
        let (x, y) = self.workspace.clamp(x, y);
        if let Some(obj) = self.objects.get_mut(id) {
            obj.supported_by = None;
            obj.contained_in = None;
            obj.pose = Pose { x, y, z: 0 };
        }
    }

    /// Deterministic free table position for a footprint of `radius`,
    /// nearest to `(near_x, near_y)`. Ignores the item `except`.
    pub fn free_table_pose(&self, radius: f64, near_x: f64, near_y: f64, except: Option<&ItemId>) -> (f64, f64) {
        let ws = self.workspace;
        let step = self.params.free_pose_step.max(1e-3);
        let clearance = self.params.free_pose_clearance;
        let mut obstacles: Vec<(f64, f64, f64)> = self
            .containers
            .values()
            .map(|c| (c.x, c.y, c.footprint_radius))
            .collect();
        obstacles.extend(
            self.objects
                .values()
                .filter(|o| Some(&o.id) != except)
                .filter(|o| o.contained_in.is_none() && o.supported_by.is_none())
                .filter(|o| self.held.as_ref() != Some(&o.id))
                .map(|o| (o.pose.x, o.pose.y, o.footprint_radius)),
        );
        let nx = ((ws.x_max - ws.x_min) / step).floor() as i64;
        let ny = ((ws.y_max - ws.y_min) / step).floor() as i64;
        let mut best: Option<(f64, f64, f64)> = None;
        for iy in 0..=ny {
            for ix in 0..=nx {
                let x = ws.x_min + ix as f64 * step;
                let y = ws.y_min + iy as f64 * step;
                let free = obstacles
                    .iter()
                    .all(|&(ox, oy, r)| ((x - ox).powi(2) + (y - oy).powi(2)).sqrt() >= radius + r + clearance);
                if !free {
                    continue;
                }
                let d = (x - near_x).powi(2) + (y - near_y).powi(2);
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, x, y));
                }
            }
        }
        match best {
            Some((_, x, y)) => (x, y),
            None => ws.clamp(near_x, near_y),
        }
    }
}

/// Attempts to grasp `object_id`.
///
/// Ungraspable targets produce a `rejected` event and leave the world state
/// untouched. Otherwise a uniform draw from the scene stream below
/// `fail_prob` produces a `grasp_failed` event and a pose perturbation of at
/// most `grasp_jitter_max`.
pub fn step_pick(scene: &mut Scene, object_id: &ItemId, fail_prob: f64) -> Result<PickResult, SimError> {
    if let Some(held) = &scene.held {
        return Err(SimError::AlreadyHolding(held.clone()));
    }
    if scene.containers.contains_key(object_id) {
        let reason = "containers cannot be grasped".to_string();
        scene.push_event(SimEventKind::Rejected, object_id, None, Some(reason.clone()));
        return Ok(PickResult::Rejected { reason });
    }
    let obj = scene
        .objects
        .get(object_id)
        .ok_or_else(|| SimError::UnknownItem(object_id.to_string()))?;
    if !obj.graspable {
        let above = scene.object_on(object_id).cloned();
        let reason = match above {
            Some(a) => format!("covered by {a}"),
            None => "not graspable".to_string(),
        };
        scene.push_event(SimEventKind::Rejected, object_id, None, Some(reason.clone()));
        return Ok(PickResult::Rejected { reason });
    }

    let mut rng = rng::stream(scene.rng_seed, scene.tick + 1);
    let draw: f64 = rng.gen();
    if draw < fail_prob {
        let r = scene.params.grasp_jitter_max * rng.gen::<f64>().sqrt();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let (x, y) = {
            let o = &scene.objects[object_id];
            scene.workspace.clamp(o.pose.x + r * theta.cos(), o.pose.y + r * theta.sin())
        };
        let o = scene.objects.get_mut(object_id).expect("checked above");
        o.pose.x = x;
        o.pose.y = y;
        scene.push_event(
            SimEventKind::GraspFailed,
            object_id,
            Some(EventTarget::Pose { x, y }),
            Some("gripper closed on nothing".into()),
        );
        return Ok(PickResult::GraspFailed { x, y });
    }

    scene.detach(object_id);
    scene.held = Some(object_id.clone());
    scene.refresh_graspable();
    scene.push_event(SimEventKind::Picked, object_id, None, None);
    Ok(PickResult::Held)
}

/// Releases the held object at `target` and returns the gripper home.
pub fn step_place(scene: &mut Scene, target: &PlaceTarget) -> Result<PlaceResult, SimError> {
    let held = scene.held.clone().ok_or(SimError::NothingHeld)?;
    let result = match target {
        PlaceTarget::Container { id } => {
            if !scene.containers.contains_key(id) {
                return Err(SimError::UnknownItem(id.to_string()));
            }
            place_in_container(scene, &held, id)
        }
        PlaceTarget::Object { id } => {
            if id == &held {
                return Err(SimError::InvalidTarget(format!("cannot place `{id}` onto itself")));
            }
            if scene.containers.contains_key(id) {
                place_in_container(scene, &held, id)
            } else if scene.objects.contains_key(id) {
                place_on_object(scene, &held, id)
            } else {
                return Err(SimError::UnknownItem(id.to_string()));
            }
        }
        PlaceTarget::Pose { x, y } => {
            let (x, y) = scene.workspace.clamp(*x, *y);
            scene.set_on_table(&held, x, y);
            scene.push_event(SimEventKind::Placed, &held, Some(EventTarget::Pose { x, y }), None);
            PlaceResult::OnTable { x, y }
        }
    };
    scene.held = None;
    scene.refresh_graspable();
    Ok(result)
}

fn place_in_container(scene: &mut Scene, held: &ItemId, cid: &ItemId) -> PlaceResult {
    let need = scene.objects[held].footprint_area();
    let mut displaced = Vec::new();
    loop {
        let c = &scene.containers[cid];
        let used = scene.used_capacity(c);
        if used + need <= c.capacity + 1e-12 {
            break;
        }
        // Smallest graspable occupant first; ties by id.
        let victim = c
            .contents
            .iter()
            .filter_map(|id| scene.objects.get(id))
            .filter(|o| o.graspable)
            .min_by(|a, b| {
                a.footprint_area()
                    .total_cmp(&b.footprint_area())
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|o| o.id.clone());
        let can_fit_alone = need <= c.capacity + 1e-12;
        match victim {
            Some(v) if can_fit_alone => {
                let (cx, cy) = (c.x, c.y);
                let r = scene.objects[&v].footprint_radius;
                scene.detach(&v);
                let (x, y) = scene.free_table_pose(r, cx, cy, Some(&v));
                scene.set_on_table(&v, x, y);
                scene.push_event(
                    SimEventKind::Displaced,
                    &v,
                    Some(EventTarget::Pose { x, y }),
                    Some(format!("pushed out of {cid} by {held}")),
                );
                displaced.push(v);
            }
            _ => {
                let (cx, cy) = (c.x, c.y);
                let r = scene.objects[held].footprint_radius;
                let (x, y) = scene.free_table_pose(r, cx, cy, Some(held));
                scene.push_event(
                    SimEventKind::Rejected,
                    held,
                    Some(EventTarget::Item { id: cid.clone() }),
                    Some("container full".into()),
                );
                scene.set_on_table(held, x, y);
                scene.push_event(SimEventKind::Placed, held, Some(EventTarget::Pose { x, y }), None);
                return PlaceResult::Overflowed { id: cid.clone(), x, y };
            }
        }
    }
    scene.insert_into(held, cid);
    scene.push_event(SimEventKind::Placed, held, Some(EventTarget::Item { id: cid.clone() }), None);
    PlaceResult::InContainer { id: cid.clone(), displaced }
}

fn place_on_object(scene: &mut Scene, held: &ItemId, target: &ItemId) -> PlaceResult {
    let top = scene.stack_top(target);
    let support = &scene.objects[&top];
    let held_r = scene.objects[held].footprint_radius;
    if support.footprint_radius >= held_r * scene.params.support_ratio {
        let pose = Pose {
            x: support.pose.x,
            y: support.pose.y,
            z: support.pose.z + 1,
        };
        let o = scene.objects.get_mut(held).expect("held object exists");
        o.supported_by = Some(top.clone());
        o.contained_in = None;
        o.pose = pose;
        scene.push_event(SimEventKind::Placed, held, Some(EventTarget::Item { id: top.clone() }), None);
        PlaceResult::OnObject { id: top }
    } else {
        let ratio = support.footprint_radius / held_r;
        let (sx, sy) = (support.pose.x, support.pose.y);
        let (x, y) = scene.free_table_pose(held_r, sx, sy, Some(held));
        scene.set_on_table(held, x, y);
        scene.push_event(
            SimEventKind::Placed,
            held,
            Some(EventTarget::Pose { x, y }),
            Some(format!(
                "slid off {top}: support ratio {ratio:.2} < {:.2}",
                scene.params.support_ratio
            )),
        );
        PlaceResult::SlidBeside { id: top, x, y }
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn id(s: &str) -> ItemId {
        ItemId::from_label(s)
    }

    fn two_stack() -> Scene {
        let mut s = scene(
            vec![block("big", 0.03, 0.0, 0.2), block("small", 0.025, 0.1, 0.2)],
            vec![],
        );
        step_pick(&mut s, &id("small"), 0.0).unwrap();
        step_place(&mut s, &PlaceTarget::Object { id: id("big") }).unwrap();
        s
    }

    #[test]
    fn small_block_stacks_on_larger_block() {
        let s = two_stack();
        let small = &s.objects[&id("small")];
        assert_eq!(small.supported_by, Some(id("big")));
        assert_eq!(small.pose.z, 1);
        assert!(!s.objects[&id("big")].graspable);
        assert!(small.graspable);
    }

    #[test]
    fn picking_top_of_stack_frees_supporter() {
        let mut s = two_stack();
        assert_eq!(step_pick(&mut s, &id("small"), 0.0).unwrap(), PickResult::Held);
        assert_eq!(s.held, Some(id("small")));
        assert!(s.objects[&id("big")].graspable);
        assert_eq!(s.objects[&id("small")].supported_by, None);
    }

    #[test]
    fn picking_bottom_of_stack_is_rejected_without_state_change() {
        let mut s = two_stack();
        let before_objects = s.objects.clone();
        assert!(!graspable_oracle(&s, &id("big")));
        let r = step_pick(&mut s, &id("big"), 0.0).unwrap();
        assert!(matches!(r, PickResult::Rejected { .. }));
        assert_eq!(s.objects, before_objects);
        assert_eq!(s.held, None);
        assert_eq!(s.event_log.last().unwrap().kind, SimEventKind::Rejected);
    }

    #[test]
    fn forced_grasp_failure_perturbs_pose_within_bound() {
        let mut s = scene(vec![block("b", 0.025, 0.0, 0.3)], vec![]);
        let r = step_pick(&mut s, &id("b"), 1.0).unwrap();
        let PickResult::GraspFailed { x, y } = r else { panic!("expected failure, got {r:?}") };
        let d = ((x - 0.0).powi(2) + (y - 0.3).powi(2)).sqrt();
        assert!(d <= 0.02 + 1e-12, "jitter {d}");
        assert_eq!(s.held, None);
        assert_eq!(s.event_log.last().unwrap().kind, SimEventKind::GraspFailed);
    }

    #[test]
    fn pick_errors() {
        let mut s = scene(vec![block("a", 0.025, 0.0, 0.3), block("b", 0.025, 0.1, 0.3)], vec![]);
        assert!(matches!(step_pick(&mut s, &id("zzz"), 0.0), Err(SimError::UnknownItem(_))));
        step_pick(&mut s, &id("a"), 0.0).unwrap();
        assert!(matches!(step_pick(&mut s, &id("b"), 0.0), Err(SimError::AlreadyHolding(_))));
        let mut s2 = scene(vec![block("a", 0.025, 0.0, 0.3)], vec![]);
        assert_eq!(
            step_place(&mut s2, &PlaceTarget::Pose { x: 0.0, y: 0.2 }),
            Err(SimError::NothingHeld)
        );
    }

    #[test]
    fn place_into_full_bowl_displaces_smallest_occupant() {
        // Capacity arithmetic: occupants of radius 0.02 and 0.025 use
        // 3.220e-3 of 5.0e-3, leaving 1.780e-3 < 2.827e-3 needed by the
        // apple. Evicting the smallest frees 1.257e-3 -> 3.037e-3 free.
        let cap = 5.0e-3;
        let used = std::f64::consts::PI * (0.02f64.powi(2) + 0.025f64.powi(2));
        let apple_area = std::f64::consts::PI * 0.03f64.powi(2);
        assert!(used + apple_area > cap);
        assert!(used - std::f64::consts::PI * 0.02f64.powi(2) + apple_area <= cap);

        let mut s = scene(
            vec![
                block("pea", 0.02, -0.2, 0.2),
                block("plum", 0.025, -0.1, 0.2),
                block("apple", 0.03, 0.1, 0.2),
            ],
            vec![bowl("bowl", cap, 0.0, 0.41)],
        );
        for item in ["pea", "plum"] {
            step_pick(&mut s, &id(item), 0.0).unwrap();
            step_place(&mut s, &PlaceTarget::Container { id: id("bowl") }).unwrap();
        }
        step_pick(&mut s, &id("apple"), 0.0).unwrap();
        let r = step_place(&mut s, &PlaceTarget::Container { id: id("bowl") }).unwrap();
        assert_eq!(
            r,
            PlaceResult::InContainer {
                id: id("bowl"),
                displaced: vec![id("pea")]
            }
        );
        let displaced: Vec<_> = s.event_log.iter().filter(|e| e.kind == SimEventKind::Displaced).collect();
        assert_eq!(displaced.len(), 1);
        assert_eq!(s.objects[&id("apple")].contained_in, Some(id("bowl")));
        assert_eq!(s.objects[&id("pea")].contained_in, None);
        assert_eq!(s.containers[&id("bowl")].contents, vec![id("plum"), id("apple")]);
    }

    #[test]
    fn oversized_object_overflows_to_table() {
        let mut s = scene(vec![block("huge", 0.06, 0.0, 0.2)], vec![bowl("bowl", 0.006, 0.0, 0.41)]);
        step_pick(&mut s, &id("huge"), 0.0).unwrap();
        let r = step_place(&mut s, &PlaceTarget::Container { id: id("bowl") }).unwrap();
        assert!(matches!(r, PlaceResult::Overflowed { .. }));
        assert_eq!(s.objects[&id("huge")].contained_in, None);
        assert_eq!(s.held, None);
    }

    #[test]
    fn placing_onto_much_smaller_object_slides_beside_it() {
        // Ratio oracle: 0.015 / 0.025 = 0.6 < 0.8.
        assert!(0.015 < 0.025 * 0.8);
        let mut s = scene(vec![block("tiny", 0.015, 0.0, 0.3), block("wide", 0.025, 0.15, 0.2)], vec![]);
        step_pick(&mut s, &id("wide"), 0.0).unwrap();
        let r = step_place(&mut s, &PlaceTarget::Object { id: id("tiny") }).unwrap();
        let PlaceResult::SlidBeside { x, y, .. } = r else { panic!("{r:?}") };
        let wide = &s.objects[&id("wide")];
        assert_eq!(wide.supported_by, None);
        assert_eq!(wide.pose.z, 0);
        let gap = ((x - 0.0).powi(2) + (y - 0.3).powi(2)).sqrt();
        assert!(gap >= 0.015 + 0.025, "must not overlap the supporter: {gap}");
        assert!(gap < 0.1, "should land adjacent: {gap}");
    }

    #[test]
    fn placing_at_pose_clamps_to_workspace() {
        let mut s = scene(vec![block("a", 0.025, 0.0, 0.3)], vec![]);
        step_pick(&mut s, &id("a"), 0.0).unwrap();
        let r = step_place(&mut s, &PlaceTarget::Pose { x: 5.0, y: -1.0 }).unwrap();
        assert_eq!(r, PlaceResult::OnTable { x: 0.3, y: 0.15 });
    }

    #[test]
    fn placing_on_stack_lands_on_its_top() {
        let mut s = two_stack();
        s.objects.insert(id("third"), block("third", 0.02, -0.1, 0.2));
        s.refresh_graspable();
        step_pick(&mut s, &id("third"), 0.0).unwrap();
        let r = step_place(&mut s, &PlaceTarget::Object { id: id("big") }).unwrap();
        assert_eq!(r, PlaceResult::OnObject { id: id("small") });
        assert_eq!(s.objects[&id("third")].pose.z, 2);
    }

    #[test]
    fn event_ticks_strictly_increase() {
        let mut s = two_stack();
        step_pick(&mut s, &id("big"), 0.0).unwrap();
        step_pick(&mut s, &id("small"), 1.0).unwrap();
        let ticks: Vec<u64> = s.event_log.iter().map(|e| e.tick).collect();
        assert!(ticks.windows(2).all(|w| w[0] < w[1]), "{ticks:?}");
    }
}
