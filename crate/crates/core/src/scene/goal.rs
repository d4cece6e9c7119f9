//! Machine-checkable goal predicates over ground truth.

use serde::{Deserialize, Serialize};

use super::{Category, ContainerKind, ItemId, ObjectInstance, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremumBy {
    Sides,
    Corners,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremumPick {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extremum {
    pub by: ExtremumBy,
    pub pick: ExtremumPick,
}

/// Declarative object selection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default)]
    pub category: Option<Category>,
    /// Restrict to these labels when non-empty.
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub symmetric: Option<bool>,
    #[serde(default)]
    pub extremum: Option<Extremum>,
    /// With `extremum`, select the complement of the extreme objects.
    #[serde(default)]
    pub invert: bool,
}

impl Selector {
    /// Selected object ids in id order.
    pub fn select(&self, scene: &Scene) -> Vec<ItemId> {
        let base: Vec<&ObjectInstance> = scene
            .objects
            .values()
            .filter(|o| self.category.map_or(true, |c| o.category == c))
            .filter(|o| self.labels.is_empty() || self.labels.iter().any(|l| l.eq_ignore_ascii_case(&o.label)))
            .filter(|o| !self.exclude.iter().any(|l| l.eq_ignore_ascii_case(&o.label)))
            .filter(|o| self.symmetric.map_or(true, |s| o.symmetric == s))
            .collect();
        let Some(ext) = self.extremum else {
            return base.into_iter().map(|o| o.id.clone()).collect();
        };
        let key = |o: &ObjectInstance| match ext.by {
            ExtremumBy::Sides => o.side_count,
            ExtremumBy::Corners => o.corner_count,
        };
        let target = match ext.pick {
            ExtremumPick::Max => base.iter().map(|o| key(o)).max(),
            ExtremumPick::Min => base.iter().map(|o| key(o)).min(),
        };
        base.into_iter()
            .filter(|o| (Some(key(o)) == target) != self.invert)
            .map(|o| o.id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackOrder {
    /// Alphabetical by letter, first letter at the bottom.
    LetterAsc,
    /// Most corners at the bottom.
    CornersDesc,
    /// Fewest sides at the bottom.
    SidesAsc,
    /// Any order, as long as all selected objects form one stack.
    Any,
}

impl StackOrder {
    /// Sort key; bottom of the stack sorts first. Ties compare equal.
    pub fn key(self, o: &ObjectInstance) -> i64 {
        match self {
            StackOrder::LetterAsc => o.letter.map_or(i64::MAX, |c| c as i64),
            StackOrder::CornersDesc => -(o.corner_count as i64),
            StackOrder::SidesAsc => o.side_count as i64,
            StackOrder::Any => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GoalPredicate {
    /// Every selected object is inside the container (directly or on a stack based in it).
    AllIn { select: Selector, container: String },
    /// No selected object is inside the container.
    NoneIn { select: Selector, container: String },
    /// Every selected object is in a container of `container_kind` with its own color.
    ColorMatch { select: Selector, container_kind: ContainerKind },
    /// Every selected object is in a container of `container_kind` with a different color.
    ColorMismatch { select: Selector, container_kind: ContainerKind },
    /// Every selected object is in one of `containers`, and each of them holds at least one.
    SplitBetween { select: Selector, containers: Vec<String> },
    /// The selected objects form one stack ordered bottom-up by `order`.
    StackOrder {
        select: Selector,
        order: StackOrder,
        #[serde(default)]
        base: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalVerdict {
    pub satisfied: bool,
    pub unmet: Vec<String>,
}

/// Evaluates the conjunction of `goal` against the scene. Pure.
pub fn check_goal(scene: &Scene, goal: &[GoalPredicate]) -> GoalVerdict {
    let mut unmet = Vec::new();
    for p in goal {
        check_one(scene, p, &mut unmet);
    }
    GoalVerdict {
        satisfied: unmet.is_empty(),
        unmet,
    }
}

fn label(scene: &Scene, id: &ItemId) -> String {
    scene.label_of(id).unwrap_or(id.as_str()).to_string()
}

fn check_one(scene: &Scene, p: &GoalPredicate, unmet: &mut Vec<String>) {
    match p {
        GoalPredicate::AllIn { select, container } => {
            let Some(c) = scene.container_by_label(container) else {
                unmet.push(format!("container `{container}` is missing"));
                return;
            };
            for id in select.select(scene) {
                if scene.effective_container(&id) != Some(&c.id) {
                    unmet.push(format!("{} is not in the {}", label(scene, &id), c.label));
                }
            }
        }
        GoalPredicate::NoneIn { select, container } => {
            let Some(c) = scene.container_by_label(container) else {
                return;
            };
            for id in select.select(scene) {
                if scene.effective_container(&id) == Some(&c.id) {
                    unmet.push(format!("{} must not be in the {} (exclusion)", label(scene, &id), c.label));
                }
            }
        }
        GoalPredicate::ColorMatch { select, container_kind } | GoalPredicate::ColorMismatch { select, container_kind } => {
            let want_match = matches!(p, GoalPredicate::ColorMatch { .. });
            for id in select.select(scene) {
                let obj = &scene.objects[&id];
                let ok = scene
                    .effective_container(&id)
                    .and_then(|cid| scene.containers.get(cid))
                    .is_some_and(|c| c.kind == *container_kind && (c.color == obj.color) == want_match);
                if !ok {
                    let rel = if want_match { "matching" } else { "non-matching" };
                    unmet.push(format!("{} is not in a {rel}-color {container_kind:?}", obj.label).to_lowercase());
                }
            }
        }
        GoalPredicate::SplitBetween { select, containers } => {
            let resolved: Vec<_> = containers.iter().filter_map(|l| scene.container_by_label(l)).collect();
            if resolved.len() != containers.len() {
                unmet.push(format!("containers {containers:?} are not all present"));
                return;
            }
            let selected = select.select(scene);
            for id in &selected {
                let inside = scene.effective_container(id);
                if !resolved.iter().any(|c| Some(&c.id) == inside) {
                    unmet.push(format!("{} is in neither of {:?}", label(scene, id), containers));
                }
            }
            for c in &resolved {
                if !selected.iter().any(|id| scene.effective_container(id) == Some(&c.id)) {
                    unmet.push(format!("the {} holds none of the selected objects", c.label));
                }
            }
        }
        GoalPredicate::StackOrder { select, order, base } => check_stack(scene, select, *order, base.as_deref(), unmet),
    }
}

fn check_stack(scene: &Scene, select: &Selector, order: StackOrder, base: Option<&str>, unmet: &mut Vec<String>) {
    let members = select.select(scene);
    if members.is_empty() {
        return;
    }
    // A bottom is a member not supported by another member.
    let bottoms: Vec<&ItemId> = members
        .iter()
        .filter(|id| {
            scene.objects[*id]
                .supported_by
                .as_ref()
                .map_or(true, |s| !members.contains(s))
        })
        .collect();
    if bottoms.len() != 1 {
        unmet.push(format!(
            "objects do not form a single stack ({} separate bases)",
            bottoms.len()
        ));
    }
    let mut reached = 0;
    for bottom in &bottoms {
        let mut chain = vec![(*bottom).clone()];
        while let Some(next) = scene.object_on(chain.last().expect("non-empty")) {
            if chain.len() > members.len() {
                break;
            }
            if !members.contains(next) {
                unmet.push(format!("{} is stacked inside the ordered stack", label(scene, next)));
                break;
            }
            chain.push(next.clone());
        }
        reached += chain.len();
        for w in chain.windows(2) {
            let (lo, hi) = (&scene.objects[&w[0]], &scene.objects[&w[1]]);
            if order.key(lo) > order.key(hi) {
                unmet.push(format!("stack order violated: {} is below {}", lo.label, hi.label));
            }
        }
    }
    if reached != members.len() {
        unmet.push(format!("only {reached} of {} objects are stacked", members.len()));
    }
    if bottoms.len() != 1 {
        return;
    }
    let bottom = bottoms[0];
    if let Some(s) = &scene.objects[bottom].supported_by {
        unmet.push(format!("stack base {} rests on {}", label(scene, bottom), label(scene, s)));
    }
    if let Some(base) = base {
        let in_base = scene
            .container_by_label(base)
            .is_some_and(|c| scene.objects[bottom].contained_in.as_ref() == Some(&c.id));
        if !in_base {
            unmet.push(format!("stack does not stand on the {base}"));
        }
    }
}
