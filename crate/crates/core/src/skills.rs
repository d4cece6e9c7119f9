//! The `vlamove` skill: ground both queries, solve reach targets, then pick
//! and place in the simulator.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Executor, SkillCall};
use crate::config::AppConfig;
use crate::kinematics::{solve_ik, ArmConfig, IkParams, KinematicsError};
use crate::perception::{resolve_label, CameraModel, Detection, Detector, OracleDetector, PerceptionError};
use crate::scene::{step_pick, step_place, ItemId, PickResult, PlaceResult, PlaceTarget, Scene, SimError, SimEvent};

/// Place queries that mean "somewhere free on the table".
pub const FREE_POSE_KEYWORDS: [&str; 4] = ["table", "desk", "free pose", "free"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillStatus {
    Ok,
    GroundingFailed,
    ActionRejected,
    GraspFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillOutcome {
    pub call: SkillCall,
    pub pick: Option<ItemId>,
    pub place: Option<PlaceTarget>,
    /// Every simulator event the skill caused, in order.
    pub events: Vec<SimEvent>,
    pub status: SkillStatus,
    pub detail: Option<String>,
    /// Joint configurations: home, pick, home, place, home.
    pub trajectory: Vec<Vec<f64>>,
}

impl SkillOutcome {
    fn new(call: &SkillCall, status: SkillStatus) -> Self {
        SkillOutcome {
            call: call.clone(),
            pick: None,
            place: None,
            events: vec![],
            status,
            detail: None,
            trajectory: vec![],
        }
    }

    fn failed(call: &SkillCall, status: SkillStatus, detail: String) -> Self {
        SkillOutcome {
            detail: Some(detail),
            ..Self::new(call, status)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkillError {
    #[error("skill configuration: {0}")]
    Config(String),
    #[error("`{0}` is not a vlamove call")]
    WrongSkill(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl From<KinematicsError> for SkillError {
    fn from(e: KinematicsError) -> Self {
        SkillError::Config(e.to_string())
    }
}

/// Everything a skill needs besides the scene.
pub struct SkillEnv<'a> {
    pub detector: &'a dyn Detector,
    pub camera: &'a CameraModel,
    pub arm: &'a ArmConfig,
    pub synonyms: &'a BTreeMap<String, String>,
    pub threshold: f64,
    pub fail_prob: f64,
}

/// Checks the camera and arm bindings and that the camera sees the workspace.
pub fn check_bindings(scene: &Scene, camera: &CameraModel, arm: &ArmConfig) -> Result<(), SkillError> {
    camera.validate().map_err(|e| SkillError::Config(e.to_string()))?;
    arm.validate()?;
    for (x, y) in scene.workspace.corners() {
        let covered = camera
            .world_to_pixel([x, y, 0.0])
            .is_ok_and(|(u, v, _)| camera.in_image(u, v));
        if !covered {
            return Err(SkillError::Config(PerceptionError::WorkspaceNotCovered(x, y).to_string()));
        }
    }
    Ok(())
}

fn planar_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Object under a detection: back-project the box centre, then take the
/// object whose footprint covers the point, preferring the closest top height.
fn locate_object(scene: &Scene, camera: &CameraModel, det: &Detection) -> Option<ItemId> {
    let (u, v) = det.center();
    let p = camera.pixel_to_world(u, v, det.depth).ok()?;
    scene
        .objects
        .values()
        .filter(|o| scene.held.as_ref() != Some(&o.id))
        .map(|o| (o, planar_dist((o.pose.x, o.pose.y), (p[0], p[1]))))
        .filter(|(o, d)| *d <= o.footprint_radius)
        .min_by(|(a, da), (b, db)| {
            (scene.top_height(&a.id) - p[2])
                .abs()
                .total_cmp(&(scene.top_height(&b.id) - p[2]).abs())
                .then(da.total_cmp(db))
                .then_with(|| a.id.cmp(&b.id))
        })
        .map(|(o, _)| o.id.clone())
}

fn locate_container(scene: &Scene, camera: &CameraModel, det: &Detection) -> Option<ItemId> {
    let (u, v) = det.center();
    let p = camera.pixel_to_world(u, v, det.depth).ok()?;
    scene
        .containers
        .values()
        .map(|c| (c, planar_dist((c.x, c.y), (p[0], p[1]))))
        .filter(|(c, d)| *d <= c.footprint_radius)
        .min_by(|(a, da), (b, db)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)))
        .map(|(c, _)| c.id.clone())
}

fn is_free_keyword(query: &str, synonyms: &BTreeMap<String, String>) -> bool {
    let q = query.trim().to_lowercase();
    let q = synonyms.get(&q).map_or(q.clone(), |s| s.to_lowercase());
    FREE_POSE_KEYWORDS.contains(&q.as_str()) || q.starts_with("free ")
}

/// Reach point for a place target.
fn place_point(scene: &Scene, target: &PlaceTarget) -> (f64, f64) {
    match target {
        PlaceTarget::Container { id } => {
            let c = &scene.containers[id];
            (c.x, c.y)
        }
        PlaceTarget::Object { id } => {
            let top = &scene.objects[&scene.stack_top(id)];
            (top.pose.x, top.pose.y)
        }
        PlaceTarget::Pose { x, y } => (*x, *y),
    }
}

/// Grounds both queries, solves both reach targets, then picks and places.
///
/// Nothing touches the scene until grounding and kinematics have succeeded
/// for both ends of the move.
pub fn execute_vlamove(call: &SkillCall, scene: &mut Scene, env: &SkillEnv<'_>) -> Result<SkillOutcome, SkillError> {
    let SkillCall::Vlamove { pick, place } = call else {
        return Err(SkillError::WrongSkill(call.to_string()));
    };
    let grounding = |e: String| Ok(SkillOutcome::failed(call, SkillStatus::GroundingFailed, e));
    let detections = match env.detector.detect(scene, env.camera) {
        Ok(d) => d,
        Err(e @ (PerceptionError::WorkspaceNotCovered(..) | PerceptionError::InvalidCamera(_))) => {
            return Err(SkillError::Config(e.to_string()))
        }
        Err(e) => return grounding(format!("detector: {e}")),
    };
    let (objects, containers): (Vec<Detection>, Vec<Detection>) = detections.into_iter().partition(|d| !d.container);

    let pick_det = match resolve_label(&objects, pick, env.synonyms, env.threshold) {
        Ok(d) => d,
        Err(e) => return grounding(format!("pick `{pick}`: {e}")),
    };
    let Some(pick_id) = locate_object(scene, env.camera, pick_det) else {
        return grounding(format!("pick `{pick}`: detection does not lie on any object"));
    };

    let target = if let Ok(d) = resolve_label(&containers, place, env.synonyms, env.threshold) {
        match locate_container(scene, env.camera, d) {
            Some(id) => PlaceTarget::Container { id },
            None => return grounding(format!("place `{place}`: detection does not lie on any container")),
        }
    } else {
        let others: Vec<Detection> = objects.iter().filter(|d| !std::ptr::eq(*d, pick_det)).cloned().collect();
        match resolve_label(&others, place, env.synonyms, env.threshold) {
            Ok(d) => match locate_object(scene, env.camera, d) {
                Some(id) if id != pick_id => PlaceTarget::Object { id },
                _ => return grounding(format!("place `{place}`: detection does not lie on another object")),
            },
            Err(e) if !is_free_keyword(place, env.synonyms) => return grounding(format!("place `{place}`: {e}")),
            Err(_) => {
                let o = &scene.objects[&pick_id];
                let (x, y) = scene.free_table_pose(o.footprint_radius, o.pose.x, o.pose.y, Some(&pick_id));
                PlaceTarget::Pose { x, y }
            }
        }
    };

    let home = env.arm.home_arm()?;
    let params = IkParams {
        damping: env.arm.damping,
        tolerance: env.arm.tolerance,
        max_iters: env.arm.max_iters,
    };
    let pick_obj = &scene.objects[&pick_id];
    let mut reach = Vec::new();
    for (what, pt) in [("pick", (pick_obj.pose.x, pick_obj.pose.y)), ("place", place_point(scene, &target))] {
        let pt = scene.workspace.clamp(pt.0, pt.1);
        let sol = solve_ik(&home, pt, params)?;
        if !sol.converged {
            let why = sol
                .diagnostic
                .unwrap_or_else(|| format!("residual {:.2e} after {} iterations", sol.residual, sol.iterations));
            let mut out = SkillOutcome::failed(call, SkillStatus::ActionRejected, format!("{what} target unreachable: {why}"));
            out.pick = Some(pick_id);
            out.place = Some(target);
            return Ok(out);
        }
        reach.push(sol.theta);
    }
    let home_theta = home.theta().to_vec();
    let mut out = SkillOutcome::new(call, SkillStatus::Ok);
    out.pick = Some(pick_id.clone());
    out.place = Some(target.clone());
    out.trajectory = vec![home_theta.clone(), reach[0].clone()];

    let first = scene.event_log.len();
    let picked = step_pick(scene, &pick_id, env.fail_prob)?;
    out.trajectory.push(home_theta.clone());
    match picked {
        PickResult::Held => {}
        PickResult::GraspFailed { .. } => {
            out.status = SkillStatus::GraspFailed;
            out.detail = Some(format!("grasp of {pick_id} failed"));
        }
        PickResult::Rejected { reason } => {
            out.status = SkillStatus::ActionRejected;
            out.detail = Some(reason);
        }
    }
    if out.status == SkillStatus::Ok {
        let placed = step_place(scene, &target)?;
        out.trajectory.push(reach[1].clone());
        out.trajectory.push(home_theta);
        out.detail = match placed {
            PlaceResult::InContainer { displaced, .. } if !displaced.is_empty() => Some(format!(
                "displaced {}",
                displaced.iter().map(ItemId::as_str).collect::<Vec<_>>().join(", ")
            )),
            PlaceResult::SlidBeside { id, .. } => Some(format!("slid off {id}")),
            PlaceResult::Overflowed { id, .. } => Some(format!("{id} is full")),
            _ => None,
        };
    }
    out.events = scene.event_log[first..].to_vec();
    Ok(out)
}

/// Terminal no-op. Warns when the gripper still holds something.
pub fn execute_done(call: &SkillCall, scene: &mut Scene) -> SkillOutcome {
    let mut out = SkillOutcome::new(call, SkillStatus::Ok);
    if let Some(held) = scene.held.clone() {
        let first = scene.event_log.len();
        scene.warn(&held, format!("done() called while holding {held}"));
        out.events = scene.event_log[first..].to_vec();
    }
    out
}

/// Dispatches on the call's skill.
pub fn execute(call: &SkillCall, scene: &mut Scene, env: &SkillEnv<'_>) -> Result<SkillOutcome, SkillError> {
    match call {
        SkillCall::Done => Ok(execute_done(call, scene)),
        SkillCall::Vlamove { .. } => execute_vlamove(call, scene, env),
    }
}

/// Executor bound to one simulated scene.
pub struct SimExecutor {
    pub scene: Scene,
    detector: Arc<dyn Detector>,
    camera: CameraModel,
    arm: ArmConfig,
    synonyms: BTreeMap<String, String>,
    threshold: f64,
    pub fail_prob: f64,
}

impl SimExecutor {
    /// Executor with the registry's camera, arm and oracle detector.
    pub fn new(registry: &AppConfig, scene: Scene, fail_prob: f64) -> Result<Self, SkillError> {
        let detector = Arc::new(OracleDetector {
            degradation: registry.perception.degradation.clone(),
            occluded_confidence: registry.perception.occluded_confidence,
        });
        Self::with_detector(registry, scene, fail_prob, detector)
    }

    pub fn with_detector(
        registry: &AppConfig,
        scene: Scene,
        fail_prob: f64,
        detector: Arc<dyn Detector>,
    ) -> Result<Self, SkillError> {
        if !(0.0..=1.0).contains(&fail_prob) {
            return Err(SkillError::Config(format!("fail_prob {fail_prob} not in [0, 1]")));
        }
        check_bindings(&scene, &registry.camera, &registry.arm)?;
        Ok(SimExecutor {
            scene,
            detector,
            camera: registry.camera.clone(),
            arm: registry.arm.clone(),
            synonyms: registry.synonyms.clone(),
            threshold: registry.perception.overlap_threshold,
            fail_prob,
        })
    }
}

impl Executor for SimExecutor {
    fn execute(&mut self, call: &SkillCall) -> SkillOutcome {
        let env = SkillEnv {
            detector: self.detector.as_ref(),
            camera: &self.camera,
            arm: &self.arm,
            synonyms: &self.synonyms,
            threshold: self.threshold,
            fail_prob: self.fail_prob,
        };
        execute(call, &mut self.scene, &env)
            .unwrap_or_else(|e| SkillOutcome::failed(call, SkillStatus::ActionRejected, e.to_string()))
    }

    fn snapshot(&self) -> Scene {
        self.scene.clone()
    }

    fn candidates(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .detector
            .detect(&self.scene, &self.camera)
            .unwrap_or_default()
            .into_iter()
            .filter(|d| !d.container)
            .map(|d| d.label)
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }
}
