//! Scenario rosters and scene construction.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Category, Color, Container, ContainerKind, ItemId, ObjectInstance, Pose, ScenarioKey, Scene, Shape, SimError,
    SimParams,
};
use crate::rng;

/// Catalog description of a graspable object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub label: String,
    pub category: Category,
    pub color: Color,
    pub shape: Shape,
    #[serde(default)]
    pub letter: Option<char>,
    #[serde(default)]
    pub corners: Option<u32>,
    #[serde(default)]
    pub sides: Option<u32>,
    #[serde(default)]
    pub symmetric: bool,
    pub radius: f64,
    pub height: f64,
}

impl CatalogEntry {
    pub fn corner_count(&self) -> u32 {
        self.corners.or(self.shape.polygon_sides()).unwrap_or(0)
    }

    pub fn side_count(&self) -> u32 {
        self.sides.or(self.shape.polygon_sides()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::Registry(format!("catalog `{}`: {msg}", self.label)));
        if self.radius <= 0.0 || self.height <= 0.0 {
            return bad("radius and height must be positive");
        }
        if self.category == Category::Container {
            return bad("containers belong in [[containers]]");
        }
        if let Some(n) = self.shape.polygon_sides() {
            if self.corner_count() != n || self.side_count() != n {
                return bad("corner/side count inconsistent with polygon shape");
            }
        }
        if self.shape == Shape::Letter && self.letter.is_none() {
            return bad("letter blocks need a `letter`");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerDef {
    pub label: String,
    pub kind: ContainerKind,
    pub color: Color,
    pub radius: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDef {
    pub title: String,
    /// Object labels in slot order.
    pub objects: Vec<String>,
    #[serde(default)]
    pub containers: Vec<String>,
}

/// Where roster items are laid out before jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub container_row_y: f64,
    pub object_rows_y: Vec<f64>,
    pub object_col_x0: f64,
    pub object_col_step: f64,
    pub object_cols: usize,
}

/// Builds a scene from a roster. `substitutions` swaps object labels
/// (e.g. a variant desk where the hammer is a claw hammer).
pub(crate) fn build_scene(
    key: ScenarioKey,
    seed: u64,
    def: &ScenarioDef,
    catalog: &BTreeMap<String, CatalogEntry>,
    container_defs: &BTreeMap<String, ContainerDef>,
    params: &SimParams,
    substitutions: &BTreeMap<String, String>,
) -> Result<Scene, SimError> {
    let ws = params.workspace;
    let layout = &params.layout;
    let jitter = params.pose_jitter;
    let draw = |slot: u64| -> (f64, f64) {
        let mut r = rng::stream(seed, u64::MAX - slot);
        (r.gen_range(-jitter..=jitter), r.gen_range(-jitter..=jitter))
    };

    let mut containers = BTreeMap::new();
    let n = def.containers.len();
    for (i, label) in def.containers.iter().enumerate() {
        let cd = container_defs
            .get(label)
            .ok_or_else(|| SimError::Registry(format!("unknown container `{label}`")))?;
        let x = ws.x_min + (i as f64 + 1.0) * (ws.x_max - ws.x_min) / (n as f64 + 1.0);
        let (dx, dy) = draw(1000 + i as u64);
        let (x, y) = ws.clamp(x + dx, layout.container_row_y + dy);
        let id = ItemId::from_label(label);
        containers.insert(
            id.clone(),
            Container {
                id,
                label: label.clone(),
                kind: cd.kind,
                color: cd.color,
                capacity: cd.capacity,
                footprint_radius: cd.radius,
                x,
                y,
                contents: vec![],
            },
        );
    }

    let slots = layout.object_cols * layout.object_rows_y.len();
    if def.objects.len() > slots {
        return Err(SimError::Registry(format!(
            "scenario {key} lists {} objects but the layout has {slots} slots",
            def.objects.len()
        )));
    }
    let mut objects = BTreeMap::new();
    for (k, label) in def.objects.iter().enumerate() {
        let label = substitutions.get(label).unwrap_or(label);
        let entry = catalog
            .get(label)
            .ok_or_else(|| SimError::Registry(format!("unknown catalog object `{label}`")))?;
        let (row, col) = (k / layout.object_cols, k % layout.object_cols);
        let (dx, dy) = draw(k as u64);
        let (x, y) = ws.clamp(
            layout.object_col_x0 + col as f64 * layout.object_col_step + dx,
            layout.object_rows_y[row] + dy,
        );
        let id = ItemId::from_label(label);
        if objects.contains_key(&id) || containers.contains_key(&id) {
            return Err(SimError::Registry(format!("duplicate item `{label}` in scenario {key}")));
        }
        objects.insert(
            id.clone(),
            ObjectInstance {
                id,
                label: label.clone(),
                category: entry.category,
                color: entry.color,
                shape: entry.shape,
                corner_count: entry.corner_count(),
                side_count: entry.side_count(),
                letter: entry.letter,
                symmetric: entry.symmetric,
                footprint_radius: entry.radius,
                height: entry.height,
                pose: Pose { x, y, z: 0 },
                supported_by: None,
                contained_in: None,
                graspable: true,
            },
        );
    }

    let mut scene = Scene {
        scenario: key,
        objects,
        containers,
        workspace: ws,
        rng_seed: seed,
        tick: 0,
        held: None,
        event_log: vec![],
        params: params.clone(),
    };
    scene.refresh_graspable();
    Ok(scene)
}
