//! Oracle planner: a sequence of pick/place moves that satisfies a goal
//! from the current state, found by simulating each move on a copy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::goal::GoalPredicate;
use super::{check_goal, step_pick, step_place, ItemId, PickResult, PlaceTarget, Scene, SimError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "id")]
pub enum OracleTarget {
    Container(ItemId),
    Object(ItemId),
    /// Any free spot on the table.
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMove {
    pub pick: ItemId,
    pub target: OracleTarget,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("goal cannot be satisfied: {0}")]
    Unsatisfiable(String),
    #[error("no progress after {0} moves")]
    NoProgress(usize),
    #[error("gripper is holding `{0}`")]
    Holding(ItemId),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Plans moves that take `scene` to a state satisfying `goal`.
///
/// Each move is applied to a private copy with perfect execution before the
/// next one is chosen, so the returned sequence is valid in order.
pub fn oracle_plan(scene: &Scene, goal: &[GoalPredicate]) -> Result<Vec<OracleMove>, PlanError> {
    if let Some(h) = &scene.held {
        return Err(PlanError::Holding(h.clone()));
    }
    let mut sim = scene.clone();
    let budget = 4 * (sim.objects.len() + 1).pow(2);
    let mut moves = Vec::new();
    while !check_goal(&sim, goal).satisfied {
        if moves.len() >= budget {
            return Err(PlanError::NoProgress(moves.len()));
        }
        let mv = goal
            .iter()
            .find_map(|p| next_move(&sim, p).transpose())
            .transpose()?
            .ok_or_else(|| PlanError::Unsatisfiable(check_goal(&sim, goal).unmet.join("; ")))?;
        apply(&mut sim, &mv)?;
        moves.push(mv);
    }
    Ok(moves)
}

/// Applies one move with perfect execution.
pub(crate) fn apply(sim: &mut Scene, mv: &OracleMove) -> Result<(), PlanError> {
    match step_pick(sim, &mv.pick, 0.0)? {
        PickResult::Held => {}
        other => return Err(PlanError::Unsatisfiable(format!("pick of {} failed: {other:?}", mv.pick))),
    }
    let target = match &mv.target {
        OracleTarget::Container(id) => PlaceTarget::Container { id: id.clone() },
        OracleTarget::Object(id) => PlaceTarget::Object { id: id.clone() },
        OracleTarget::Table => {
            let o = &sim.objects[&mv.pick];
            let (x, y) = sim.free_table_pose(o.footprint_radius, o.pose.x, o.pose.y, Some(&mv.pick));
            PlaceTarget::Pose { x, y }
        }
    };
    step_place(sim, &target)?;
    Ok(())
}

/// Move `id` to `target`, first clearing anything stacked on it.
fn move_to(scene: &Scene, id: &ItemId, target: OracleTarget) -> OracleMove {
    let top = scene.stack_top(id);
    if &top != id {
        OracleMove {
            pick: top,
            target: OracleTarget::Table,
        }
    } else {
        OracleMove { pick: id.clone(), target }
    }
}

fn container_id(scene: &Scene, label: &str) -> Result<ItemId, PlanError> {
    scene
        .container_by_label(label)
        .map(|c| c.id.clone())
        .ok_or_else(|| PlanError::Unsatisfiable(format!("no container `{label}`")))
}

fn next_move(scene: &Scene, p: &GoalPredicate) -> Result<Option<OracleMove>, PlanError> {
    match p {
        GoalPredicate::NoneIn { select, container } => {
            let Some(c) = scene.container_by_label(container) else { return Ok(None) };
            Ok(select
                .select(scene)
                .into_iter()
                .find(|id| scene.effective_container(id) == Some(&c.id))
                .map(|id| move_to(scene, &id, OracleTarget::Table)))
        }
        GoalPredicate::AllIn { select, container } => {
            let cid = container_id(scene, container)?;
            Ok(select
                .select(scene)
                .into_iter()
                .find(|id| scene.effective_container(id) != Some(&cid))
                .map(|id| move_to(scene, &id, OracleTarget::Container(cid.clone()))))
        }
        GoalPredicate::ColorMatch { select, container_kind } | GoalPredicate::ColorMismatch { select, container_kind } => {
            let want_match = matches!(p, GoalPredicate::ColorMatch { .. });
            for id in select.select(scene) {
                let obj = &scene.objects[&id];
                let ok = scene
                    .effective_container(&id)
                    .and_then(|c| scene.containers.get(c))
                    .is_some_and(|c| c.kind == *container_kind && (c.color == obj.color) == want_match);
                if ok {
                    continue;
                }
                // Least-filled eligible container; ties by id.
                let dest = scene
                    .containers
                    .values()
                    .filter(|c| c.kind == *container_kind && (c.color == obj.color) == want_match)
                    .min_by_key(|c| (c.contents.len(), c.id.clone()))
                    .ok_or_else(|| PlanError::Unsatisfiable(format!("no eligible container for {}", obj.label)))?;
                return Ok(Some(move_to(scene, &id, OracleTarget::Container(dest.id.clone()))));
            }
            Ok(None)
        }
        GoalPredicate::SplitBetween { select, containers } => {
            let ids = containers
                .iter()
                .map(|l| container_id(scene, l))
                .collect::<Result<Vec<_>, _>>()?;
            let selected = select.select(scene);
            let count = |cid: &ItemId| {
                selected
                    .iter()
                    .filter(|id| scene.effective_container(id) == Some(cid))
                    .count()
            };
            if let Some(id) = selected
                .iter()
                .find(|id| !ids.iter().any(|c| scene.effective_container(id) == Some(c)))
            {
                let dest = ids.iter().min_by_key(|c| count(c)).expect("non-empty").clone();
                return Ok(Some(move_to(scene, id, OracleTarget::Container(dest))));
            }
            if let Some(empty) = ids.iter().find(|c| count(c) == 0) {
                let fullest = ids.iter().max_by_key(|c| count(c)).expect("non-empty");
                if count(fullest) < 2 {
                    return Err(PlanError::Unsatisfiable("not enough objects to split".into()));
                }
                let donor = selected
                    .iter()
                    .rev()
                    .find(|id| scene.effective_container(id) == Some(fullest))
                    .expect("fullest container holds a selected object");
                return Ok(Some(move_to(scene, donor, OracleTarget::Container(empty.clone()))));
            }
            Ok(None)
        }
        GoalPredicate::StackOrder { select, order, base } => {
            let mut members: Vec<_> = select.select(scene).into_iter().map(|id| &scene.objects[&id]).collect();
            if members.is_empty() {
                return Ok(None);
            }
            members.sort_by(|a, b| order.key(a).cmp(&order.key(b)).then_with(|| a.label.cmp(&b.label)));
            let desired: Vec<ItemId> = members.iter().map(|o| o.id.clone()).collect();
            let base_id = base.as_deref().map(|b| container_id(scene, b)).transpose()?;
            stack_move(scene, &desired, base_id.as_ref())
        }
    }
}

/// Next move toward the stack `desired` (bottom first), built up from the
/// longest correct prefix.
fn stack_move(scene: &Scene, desired: &[ItemId], base: Option<&ItemId>) -> Result<Option<OracleMove>, PlanError> {
    let bottom_ok = |id: &ItemId| {
        let o = &scene.objects[id];
        o.supported_by.is_none() && base.map_or(true, |b| o.contained_in.as_ref() == Some(b))
    };
    let mut prefix = 0;
    if bottom_ok(&desired[0]) {
        prefix = 1;
        while prefix < desired.len() && scene.objects[&desired[prefix]].supported_by.as_ref() == Some(&desired[prefix - 1]) {
            prefix += 1;
        }
    }
    if prefix == desired.len() {
        // Built; clear any intruder resting on the top.
        let top = desired.last().expect("non-empty");
        return Ok(scene.object_on(top).map(|_| OracleMove {
            pick: scene.stack_top(top),
            target: OracleTarget::Table,
        }));
    }
    if prefix > 0 {
        let below = &desired[prefix - 1];
        if scene.object_on(below).is_some() {
            return Ok(Some(OracleMove {
                pick: scene.stack_top(below),
                target: OracleTarget::Table,
            }));
        }
    }
    let next = &desired[prefix];
    let target = match (prefix, base) {
        (0, Some(b)) => OracleTarget::Container(b.clone()),
        (0, None) => OracleTarget::Table,
        _ => OracleTarget::Object(desired[prefix - 1].clone()),
    };
    Ok(Some(move_to(scene, next, target)))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{Category, Selector, StackOrder};
    use super::*;

    fn id(s: &str) -> ItemId {
        ItemId::from_label(s)
    }

    fn lettered(label: &str, letter: char, x: f64) -> super::super::ObjectInstance {
        let mut o = block(label, 0.025, x, 0.2);
        o.category = Category::Letter;
        o.letter = Some(letter);
        o
    }

    #[test]
    fn rebuilds_a_wrongly_ordered_stack() {
        let mut s = scene(
            vec![lettered("A", 'A', -0.2), lettered("B", 'B', 0.0), lettered("C", 'C', 0.2)],
            vec![],
        );
        // Build C (bottom), B, A (top).
        for (pick, onto) in [("B", "C"), ("A", "B")] {
            step_pick(&mut s, &id(pick), 0.0).unwrap();
            step_place(&mut s, &PlaceTarget::Object { id: id(onto) }).unwrap();
        }
        let goal = vec![GoalPredicate::StackOrder {
            select: Selector {
                category: Some(Category::Letter),
                ..Default::default()
            },
            order: StackOrder::LetterAsc,
            base: None,
        }];
        assert!(!check_goal(&s, &goal).satisfied);
        let moves = oracle_plan(&s, &goal).unwrap();
        for m in &moves {
            apply(&mut s, m).unwrap();
        }
        assert!(check_goal(&s, &goal).satisfied, "{:?}", check_goal(&s, &goal));
        assert_eq!(s.objects[&id("C")].supported_by, Some(id("B")));
    }

    #[test]
    fn satisfied_goal_needs_no_moves() {
        let s = scene(vec![block("a", 0.025, 0.0, 0.2)], vec![bowl("bowl", 0.01, 0.0, 0.41)]);
        let goal = vec![GoalPredicate::NoneIn {
            select: Selector::default(),
            container: "bowl".into(),
        }];
        assert_eq!(oracle_plan(&s, &goal).unwrap(), vec![]);
    }

    #[test]
    fn missing_container_is_unsatisfiable() {
        let s = scene(vec![block("a", 0.025, 0.0, 0.2)], vec![]);
        let goal = vec![GoalPredicate::AllIn {
            select: Selector::default(),
            container: "crate".into(),
        }];
        assert!(matches!(oracle_plan(&s, &goal), Err(PlanError::Unsatisfiable(_))));
    }
}
