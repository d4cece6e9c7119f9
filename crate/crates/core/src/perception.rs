//! Detection and pinhole projection.
//!
//! The simulator has no renderer, so the built-in detector reads ground truth
//! and projects it through the camera; occluded objects (something stacked on
//! them) can be degraded. Other detectors plug in through [`Detector`].

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scene::{ItemId, Scene};

/// Wire version of the detector JSON schema.
pub const DETECTOR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    OutOfImage { u: f64, v: f64, width: u32, height: u32 },
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("camera does not cover the workspace corner ({0}, {1})")]
    WorkspaceNotCovered(f64, f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid degradation: {0}")]
    InvalidDegradation(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("no detections to match against")]
    NoDetections,
    #[error("nothing matches `{query}` (best overlap {best:.2})")]
    NotFound { query: String, best: f64 },
    #[error("detector service error: {0}")]
    Service(String),
}

/// Intrinsics plus camera-to-world extrinsics: `world = rotation * p_cam + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    /// Identity extrinsics, 640x480.
    pub fn with_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            width: 640,
            height: 480,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    fn r(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: &str| Err(PerceptionError::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        let r = self.r();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return bad("rotation is not orthonormal");
        }
        Ok(())
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64
    }

    /// Back-projects a pixel at `depth` (camera z) to world coordinates.
    pub fn pixel_to_world(&self, u: f64, v: f64, depth: f64) -> Result<[f64; 3], PerceptionError> {
        if !(depth > 0.0) {
            return Err(PerceptionError::NonPositiveDepth(depth));
        }
        if !self.in_image(u, v) {
            return Err(PerceptionError::OutOfImage {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let p = Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth);
        Ok((self.r() * p + self.t()).into())
    }

    /// Projects a world point; returns `(u, v, depth)`. The pixel may lie
    /// outside the image.
    pub fn world_to_pixel(&self, p: [f64; 3]) -> Result<(f64, f64, f64), PerceptionError> {
        let c = self.r().transpose() * (Vector3::from(p) - self.t());
        if !(c.z > 0.0) {
            return Err(PerceptionError::BehindCamera);
        }
        Ok((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// World z of the camera centre; table depth for an overhead camera.
    pub fn height_above_table(&self) -> f64 {
        self.translation[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    /// `[u_min, v_min, u_max, v_max]` in pixels.
    pub bbox: [f64; 4],
    /// Camera-frame depth of the box centre (meters).
    pub depth: f64,
    pub confidence: f64,
    /// True for containers (bowls, plates, boxes).
    #[serde(default)]
    pub container: bool,
    /// Ground-truth source; only the oracle detector fills it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ItemId>,
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorDegradation {
    pub miss_prob: f64,
    pub occlusion_mislabel_prob: f64,
    /// Maximum box-centre shift in pixels.
    pub box_jitter_px: f64,
    pub seed: u64,
}

impl DetectorDegradation {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        for (name, p) in [("miss_prob", self.miss_prob), ("occlusion_mislabel_prob", self.occlusion_mislabel_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PerceptionError::InvalidDegradation(format!("{name} = {p} not in [0, 1]")));
            }
        }
        if !(self.box_jitter_px >= 0.0) {
            return Err(PerceptionError::InvalidDegradation("box_jitter_px must be >= 0".into()));
        }
        Ok(())
    }
}

/// Oracle detection over ground truth.
///
/// Objects with something stacked on them are occluded: those alone may be
/// dropped or relabeled. Every box centre is shifted by at most
/// `box_jitter_px`. Draws come from a stream keyed by the degradation seed and
/// scene tick, so a snapshot always yields the same detections.
pub fn oracle_detect(
    scene: &Scene,
    camera: &CameraModel,
    degradation: &DetectorDegradation,
    occluded_confidence: f64,
) -> Result<Vec<Detection>, PerceptionError> {
    degradation.validate()?;
    for (x, y) in scene.workspace.corners() {
        let (u, v, _) = camera
            .world_to_pixel([x, y, 0.0])
            .map_err(|_| PerceptionError::WorkspaceNotCovered(x, y))?;
        if !camera.in_image(u, v) {
            return Err(PerceptionError::WorkspaceNotCovered(x, y));
        }
    }
    let box_for = |x: f64, y: f64, z: f64, r: f64, k: u64| -> Result<([f64; 4], f64), PerceptionError> {
        let (mut u, mut v, d) = camera.world_to_pixel([x, y, z])?;
        let mut g = rng::stream(rng::mix(degradation.seed, scene.tick), k);
        if degradation.box_jitter_px > 0.0 {
            u += g.gen_range(-1.0..=1.0) * degradation.box_jitter_px;
            v += g.gen_range(-1.0..=1.0) * degradation.box_jitter_px;
        }
        let (w, h) = (camera.width as f64, camera.height as f64);
        let (u, v) = (u.clamp(0.0, w), v.clamp(0.0, h));
        let (ru, rv) = (r * camera.fx / d, r * camera.fy / d);
        Ok((
            [(u - ru).max(0.0), (v - rv).max(0.0), (u + ru).min(w), (v + rv).min(h)],
            d,
        ))
    };

    let mut out = Vec::new();
    for (k, o) in scene.objects.values().enumerate() {
        if scene.held.as_ref() == Some(&o.id) {
            continue;
        }
        let occluded = scene.object_on(&o.id).is_some();
        let mut label = o.label.clone();
        let mut confidence = 1.0;
        if occluded {
            let mut g = rng::stream(rng::mix(degradation.seed, scene.tick), 1 << 32 | k as u64);
            let (miss, mislabel): (f64, f64) = (g.gen(), g.gen());
            if miss < degradation.miss_prob {
                continue;
            }
            confidence = occluded_confidence;
            if mislabel < degradation.occlusion_mislabel_prob {
                let others: Vec<&str> = scene
                    .objects
                    .values()
                    .filter(|p| p.category == o.category && p.label != o.label)
                    .map(|p| p.label.as_str())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if !others.is_empty() {
                    label = others[g.gen_range(0..others.len())].to_string();
                }
            }
        }
        let (bbox, depth) = box_for(o.pose.x, o.pose.y, scene.top_height(&o.id), o.footprint_radius, k as u64)?;
        out.push(Detection {
            label,
            bbox,
            depth,
            confidence,
            container: false,
            source: Some(o.id.clone()),
        });
    }
    let base = scene.objects.len() as u64;
    for (k, c) in scene.containers.values().enumerate() {
        let (bbox, depth) = box_for(c.x, c.y, 0.0, c.footprint_radius, base + k as u64)?;
        out.push(Detection {
            label: c.label.clone(),
            bbox,
            depth,
            confidence: 1.0,
            container: true,
            source: Some(c.id.clone()),
        });
    }
    Ok(out)
}

/// Source of detections for the skill executor.
pub trait Detector: Send + Sync {
    fn detect(&self, scene: &Scene, camera: &CameraModel) -> Result<Vec<Detection>, PerceptionError>;
}

#[derive(Debug, Clone, Default)]
pub struct OracleDetector {
    pub degradation: DetectorDegradation,
    pub occluded_confidence: f64,
}

impl Detector for OracleDetector {
    fn detect(&self, scene: &Scene, camera: &CameraModel) -> Result<Vec<Detection>, PerceptionError> {
        oracle_detect(scene, camera, &self.degradation, self.occluded_confidence)
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    v: u32,
    camera: &'a CameraModel,
    scene: serde_json::Value,
}

#[derive(Deserialize)]
struct DetectResponse {
    v: u32,
    detections: Vec<Detection>,
}

/// Client for an external detector speaking the versioned JSON schema:
/// `POST {v, camera, scene}` returns `{v, detections: [Detection]}`.
pub struct HttpDetector {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpDetector {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, PerceptionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| PerceptionError::Service(e.to_string()))?;
        Ok(HttpDetector {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl Detector for HttpDetector {
    fn detect(&self, scene: &Scene, camera: &CameraModel) -> Result<Vec<Detection>, PerceptionError> {
        let svc = |e: String| PerceptionError::Service(e);
        let body = DetectRequest {
            v: DETECTOR_SCHEMA_VERSION,
            camera,
            scene: crate::scene::canonical_value(scene).map_err(|e| svc(e.to_string()))?,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| svc(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(svc(format!("status {}", resp.status())));
        }
        let parsed: DetectResponse = resp.json().map_err(|e| svc(e.to_string()))?;
        if parsed.v != DETECTOR_SCHEMA_VERSION {
            return Err(svc(format!("unsupported schema version {}", parsed.v)));
        }
        for d in &parsed.detections {
            if !(d.depth > 0.0) || !(0.0..=1.0).contains(&d.confidence) {
                return Err(svc(format!("malformed detection `{}`", d.label)));
            }
        }
        Ok(parsed.detections)
    }
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn normalize(s: &str) -> String {
    tokens_in_order(s).join(" ")
}

fn tokens_in_order(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Jaccard overlap of the token sets.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// The query plus every phrase obtained by substituting a synonym entry, in
/// either direction.
pub fn expand_query(query: &str, synonyms: &BTreeMap<String, String>) -> Vec<String> {
    let q = normalize(query);
    let mut out = vec![q.clone()];
    for (a, b) in synonyms {
        let (a, b) = (normalize(a), normalize(b));
        for (from, to) in [(&a, &b), (&b, &a)] {
            if from.is_empty() {
                continue;
            }
            let padded = format!(" {q} ");
            let needle = format!(" {from} ");
            if padded.contains(&needle) {
                let v = padded.replace(&needle, &format!(" {to} ")).trim().to_string();
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Best detection for `query`.
///
/// Score is the maximum token overlap over the synonym-expanded query. Ties
/// go to higher confidence, then to the lexicographically smaller label. A
/// best score below `threshold` is not-found.
pub fn resolve_label<'a>(
    detections: &'a [Detection],
    query: &str,
    synonyms: &BTreeMap<String, String>,
    threshold: f64,
) -> Result<&'a Detection, PerceptionError> {
    if tokens(query).is_empty() {
        return Err(PerceptionError::EmptyQuery);
    }
    if detections.is_empty() {
        return Err(PerceptionError::NoDetections);
    }
    let variants = expand_query(query, synonyms);
    let score = |d: &Detection| variants.iter().map(|v| token_overlap(v, &d.label)).fold(0.0, f64::max);
    let best = detections
        .iter()
        .map(|d| (score(d), d))
        .max_by(|(sa, a), (sb, b)| {
            sa.total_cmp(sb)
                .then_with(|| a.confidence.total_cmp(&b.confidence))
                .then_with(|| b.label.cmp(&a.label))
        })
        .expect("non-empty");
    if best.0 < threshold {
        return Err(PerceptionError::NotFound {
            query: query.to_string(),
            best: best.0,
        });
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AppConfig;
    use crate::scene::{step_pick, step_place, PlaceTarget};

    fn det(label: &str, confidence: f64) -> Detection {
        Detection {
            label: label.into(),
            bbox: [0.0, 0.0, 10.0, 10.0],
            depth: 0.5,
            confidence,
            container: false,
            source: None,
        }
    }

    fn syn() -> BTreeMap<String, String> {
        BTreeMap::from([("iron clip".to_string(), "metal clip".to_string())])
    }

    #[test]
    fn principal_ray_back_projects_to_optical_axis() {
        let cam = CameraModel::with_intrinsics(600.0, 600.0, 320.0, 240.0);
        assert_eq!(cam.pixel_to_world(320.0, 240.0, 0.5).unwrap(), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn off_axis_pixel_matches_forward_projection() {
        let cam = CameraModel::with_intrinsics(600.0, 600.0, 320.0, 240.0);
        // Forward: u = 600 * 0.15 / 0.6 + 320 = 470.
        let (u, v, d) = cam.world_to_pixel([0.15, 0.0, 0.6]).unwrap();
        assert!((u - 470.0).abs() < 1e-9 && (v - 240.0).abs() < 1e-12 && (d - 0.6).abs() < 1e-12);
        let p = cam.pixel_to_world(470.0, 240.0, 0.6).unwrap();
        assert!((p[0] - 0.15).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.6, "{p:?}");
    }

    #[test]
    fn projection_errors() {
        let cam = CameraModel::with_intrinsics(600.0, 600.0, 320.0, 240.0);
        assert_eq!(cam.pixel_to_world(320.0, 240.0, 0.0), Err(PerceptionError::NonPositiveDepth(0.0)));
        assert!(matches!(cam.pixel_to_world(-1.0, 10.0, 1.0), Err(PerceptionError::OutOfImage { .. })));
        assert_eq!(cam.world_to_pixel([0.0, 0.0, -1.0]), Err(PerceptionError::BehindCamera));
        let mut bad = cam.clone();
        bad.rotation[0][0] = 1.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exact_label_wins() {
        let d = [det("blue block", 1.0), det("red block", 1.0)];
        assert_eq!(resolve_label(&d, "red block", &syn(), 0.5).unwrap().label, "red block");
    }

    #[test]
    fn synonym_maps_iron_clip_to_metal_clip() {
        let d = [det("stapler", 1.0), det("metal clip", 1.0), det("tape", 1.0)];
        assert_eq!(resolve_label(&d, "iron clip", &syn(), 0.5).unwrap().label, "metal clip");
        assert_eq!(resolve_label(&d, "the iron clip", &syn(), 0.5).unwrap().label, "metal clip");
    }

    #[test]
    fn missing_label_is_not_found() {
        let d = [det("red block", 1.0)];
        assert!(matches!(
            resolve_label(&d, "banana", &syn(), 0.5),
            Err(PerceptionError::NotFound { .. })
        ));
        assert_eq!(resolve_label(&[], "banana", &syn(), 0.5), Err(PerceptionError::NoDetections));
        assert_eq!(resolve_label(&d, "  ", &syn(), 0.5), Err(PerceptionError::EmptyQuery));
    }

    #[test]
    fn ties_prefer_confidence_then_smaller_label() {
        // "block" overlaps each label at exactly 0.5.
        let d = [det("red block", 0.6), det("blue block", 0.6), det("green block", 0.9)];
        assert_eq!(resolve_label(&d, "block", &syn(), 0.5).unwrap().label, "green block");
        let d = [det("red block", 0.6), det("blue block", 0.6)];
        assert_eq!(resolve_label(&d, "block", &syn(), 0.5).unwrap().label, "blue block");
    }

    fn stacked_scene() -> Scene {
        let cfg = AppConfig::builtin();
        let mut s = cfg.make_scenario(3, 5).unwrap();
        let red = s.object_by_label("red block").unwrap().id.clone();
        let blue = s.object_by_label("blue block").unwrap().id.clone();
        step_pick(&mut s, &red, 0.0).unwrap();
        step_place(&mut s, &PlaceTarget::Object { id: blue }).unwrap();
        s
    }

    #[test]
    fn zero_degradation_detects_every_unheld_object_once() {
        let cfg = AppConfig::builtin();
        let mut s = cfg.make_scenario(5, 1).unwrap();
        let apple = s.object_by_label("apple").unwrap().id.clone();
        step_pick(&mut s, &apple, 0.0).unwrap();
        let d = oracle_detect(&s, &cfg.camera, &DetectorDegradation::default(), 0.6).unwrap();
        let objs: Vec<_> = d.iter().filter(|d| !d.container).collect();
        assert_eq!(objs.len(), s.objects.len() - 1);
        for x in objs {
            let src = x.source.as_ref().unwrap();
            assert_eq!(s.objects[src].label, x.label);
            assert!(src != &apple);
        }
    }

    #[test]
    fn occluded_bottom_block_is_relabeled_within_category() {
        let cfg = AppConfig::builtin();
        let s = stacked_scene();
        let deg = DetectorDegradation {
            occlusion_mislabel_prob: 1.0,
            ..Default::default()
        };
        let d = oracle_detect(&s, &cfg.camera, &deg, 0.6).unwrap();
        let blue = s.object_by_label("blue block").unwrap().id.clone();
        let bottom = d.iter().find(|x| x.source.as_ref() == Some(&blue)).unwrap();
        assert_ne!(bottom.label, "blue block");
        assert!(bottom.label.ends_with("block"));
        assert_eq!(bottom.confidence, 0.6);
        // Non-occluded objects keep their labels.
        for x in d.iter().filter(|x| x.source.as_ref() != Some(&blue)) {
            assert_eq!(Some(x.label.as_str()), s.label_of(x.source.as_ref().unwrap()));
        }
    }

    #[test]
    fn miss_prob_only_affects_occluded_objects() {
        let cfg = AppConfig::builtin();
        let deg = DetectorDegradation {
            miss_prob: 1.0,
            ..Default::default()
        };
        let s = cfg.make_scenario(3, 5).unwrap();
        let d = oracle_detect(&s, &cfg.camera, &deg, 0.6).unwrap();
        assert_eq!(d.iter().filter(|x| !x.container).count(), s.objects.len());
        let s = stacked_scene();
        let d = oracle_detect(&s, &cfg.camera, &deg, 0.6).unwrap();
        assert_eq!(d.iter().filter(|x| !x.container).count(), s.objects.len() - 1);
    }

    #[test]
    fn narrow_camera_fails_coverage_check() {
        let cfg = AppConfig::builtin();
        let mut cam = cfg.camera.clone();
        cam.fx = 3000.0;
        let s = cfg.make_scenario(1, 0).unwrap();
        assert!(matches!(
            oracle_detect(&s, &cam, &DetectorDegradation::default(), 0.6),
            Err(PerceptionError::WorkspaceNotCovered(..))
        ));
    }
}
