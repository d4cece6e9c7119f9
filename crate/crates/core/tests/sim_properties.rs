//! Simulator invariants under random action sequences.

use std::collections::BTreeSet;

use proptest::prelude::*;
use tabletop_core::config::AppConfig;
use tabletop_core::scene::{
    canonical_json, check_goal, oracle_plan, step_pick, step_place, ItemId, OracleTarget, PlaceTarget, Scene,
    SimEventKind,
};

fn registry() -> &'static AppConfig {
    static REG: std::sync::OnceLock<AppConfig> = std::sync::OnceLock::new();
    REG.get_or_init(AppConfig::builtin)
}

#[derive(Debug, Clone)]
enum Action {
    Pick(usize),
    PlaceContainer(usize),
    PlaceObject(usize),
    PlacePose(f64, f64),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        (0usize..16).prop_map(Action::Pick),
        (0usize..8).prop_map(Action::PlaceContainer),
        (0usize..16).prop_map(Action::PlaceObject),
        (-0.5f64..0.5, 0.0f64..0.7).prop_map(|(x, y)| Action::PlacePose(x, y)),
    ]
}

fn nth<T: Clone>(items: impl Iterator<Item = T>, i: usize) -> Option<T> {
    let v: Vec<T> = items.collect();
    (!v.is_empty()).then(|| v[i % v.len()].clone())
}

/// Applies `a` when its precondition holds; returns whether it ran.
fn apply(scene: &mut Scene, a: &Action, fail_prob: f64) -> bool {
    match a {
        Action::Pick(i) => {
            if scene.held.is_some() {
                return false;
            }
            let Some(id) = nth(scene.objects.keys().cloned(), *i) else { return false };
            step_pick(scene, &id, fail_prob).expect("pick precondition holds");
        }
        Action::PlaceContainer(i) => {
            let Some(id) = nth(scene.containers.keys().cloned(), *i) else { return false };
            if scene.held.is_none() {
                return false;
            }
            step_place(scene, &PlaceTarget::Container { id }).expect("place precondition holds");
        }
        Action::PlaceObject(i) => {
            let held = scene.held.clone();
            let Some(id) = nth(scene.objects.keys().filter(|k| Some(*k) != held.as_ref()).cloned(), *i) else {
                return false;
            };
            if held.is_none() {
                return false;
            }
            step_place(scene, &PlaceTarget::Object { id }).expect("place precondition holds");
        }
        Action::PlacePose(x, y) => {
            if scene.held.is_none() {
                return false;
            }
            step_place(scene, &PlaceTarget::Pose { x: *x, y: *y }).expect("place precondition holds");
        }
    }
    true
}

/// Graspable iff nothing rests on the object, recomputed by brute force.
fn graspable_brute(scene: &Scene, id: &ItemId) -> bool {
    !scene.objects.values().any(|o| o.supported_by.as_ref() == Some(id))
}

fn check_invariants(scene: &Scene) -> Result<(), TestCaseError> {
    for o in scene.objects.values() {
        prop_assert!(!(o.supported_by.is_some() && o.contained_in.is_some()), "{} has both relations", o.id);
        prop_assert!(scene.workspace.contains(o.pose.x, o.pose.y), "{} off the table", o.id);
        match &o.supported_by {
            None => prop_assert_eq!(o.pose.z, 0),
            Some(s) => prop_assert_eq!(o.pose.z, scene.objects[s].pose.z + 1),
        }
        prop_assert_eq!(o.graspable, graspable_brute(scene, &o.id), "graspable flag of {}", o.id);
        if let Some(c) = &o.contained_in {
            prop_assert!(scene.containers[c].contents.contains(&o.id));
        }
    }
    for c in scene.containers.values() {
        let used: f64 = c.contents.iter().map(|id| scene.objects[id].footprint_area()).sum();
        prop_assert!(used <= c.capacity + 1e-9, "{} over capacity", c.id);
        for id in &c.contents {
            prop_assert_eq!(scene.objects[id].contained_in.as_ref(), Some(&c.id));
        }
    }
    prop_assert!(scene.support_graph_acyclic());
    let ticks: Vec<u64> = scene.event_log.iter().map(|e| e.tick).collect();
    prop_assert!(ticks.windows(2).all(|w| w[0] < w[1]), "ticks not strictly increasing");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn relations_stay_sound(scenario in 1u32..=10, seed in 0u64..1000, fail in 0.0f64..0.5,
                            actions in prop::collection::vec(action(), 0..40)) {
        let mut scene = registry().make_scenario(scenario, seed).unwrap();
        let ids: BTreeSet<ItemId> = scene.objects.keys().cloned().collect();
        check_invariants(&scene)?;
        for a in &actions {
            let before = scene.event_log.len();
            if apply(&mut scene, a, fail) {
                // Append-only: the prefix never changes.
                prop_assert!(scene.event_log.len() > before);
            }
            check_invariants(&scene)?;
            let now: BTreeSet<ItemId> = scene.objects.keys().cloned().collect();
            prop_assert_eq!(&now, &ids);
        }
    }

    #[test]
    fn replay_is_byte_identical(scenario in 1u32..=10, seed in 0u64..1000,
                                actions in prop::collection::vec(action(), 0..30)) {
        let run = || {
            let mut s = registry().make_scenario(scenario, seed).unwrap();
            for a in &actions {
                apply(&mut s, a, 0.4);
            }
            canonical_json(&s).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn oracle_plans_reach_every_goal(task_idx in 0usize..24, seed in 0u64..500) {
        let reg = registry();
        let task = &reg.tasks[task_idx];
        let mut scene = reg.make_task_scene(task, seed).unwrap();
        for mv in oracle_plan(&scene, &task.goal).unwrap() {
            prop_assert!(matches!(step_pick(&mut scene, &mv.pick, 0.0).unwrap(),
                tabletop_core::scene::PickResult::Held));
            let target = match mv.target {
                OracleTarget::Container(id) => PlaceTarget::Container { id },
                OracleTarget::Object(id) => PlaceTarget::Object { id },
                OracleTarget::Table => {
                    let o = &scene.objects[&mv.pick];
                    let (x, y) = scene.free_table_pose(o.footprint_radius, o.pose.x, o.pose.y, Some(&mv.pick));
                    PlaceTarget::Pose { x, y }
                }
            };
            step_place(&mut scene, &target).unwrap();
        }
        let v = check_goal(&scene, &task.goal);
        prop_assert!(v.satisfied, "{}: {:?}", task.id, v.unmet);
    }

    #[test]
    fn rejected_pick_leaves_scene_unchanged(seed in 0u64..300) {
        let mut scene = registry().make_scenario(1, seed).unwrap();
        let mut ids = scene.objects.keys().cloned();
        let (a, b) = (ids.next().unwrap(), ids.next().unwrap());
        step_pick(&mut scene, &a, 0.0).unwrap();
        step_place(&mut scene, &PlaceTarget::Object { id: b.clone() }).unwrap();
        if scene.objects[&a].supported_by.as_ref() == Some(&b) {
            let mut probe = scene.clone();
            step_pick(&mut probe, &b, 0.0).unwrap();
            prop_assert_eq!(probe.event_log.last().unwrap().kind, SimEventKind::Rejected);
            probe.event_log.pop();
            probe.tick = scene.tick;
            prop_assert_eq!(probe, scene);
        }
    }
}

#[test]
fn unknown_scenario_and_double_pick_are_errors() {
    let reg = registry();
    assert!(reg.make_scenario(11, 0).is_err());
    assert!(reg.make_scenario(0, 0).is_err());
    let mut s = reg.make_scenario(4, 3).unwrap();
    let ids: Vec<ItemId> = s.objects.keys().cloned().collect();
    step_pick(&mut s, &ids[0], 0.0).unwrap();
    assert!(step_pick(&mut s, &ids[1], 0.0).is_err());
    assert!(step_place(&mut s, &PlaceTarget::Container { id: ItemId::new("nope") }).is_err());
}

#[test]
fn grasp_failure_jitter_is_bounded() {
    let reg = registry();
    for seed in 0..200 {
        let mut s = reg.make_scenario(7, seed).unwrap();
        let id = s.objects.keys().next().unwrap().clone();
        let before = s.objects[&id].pose;
        match step_pick(&mut s, &id, 1.0).unwrap() {
            tabletop_core::scene::PickResult::GraspFailed { x, y } => {
                let d = ((x - before.x).powi(2) + (y - before.y).powi(2)).sqrt();
                assert!(d <= s.params.grasp_jitter_max + 1e-12, "jitter {d}");
                assert!(s.held.is_none());
            }
            other => panic!("{other:?}"),
        }
    }
}
