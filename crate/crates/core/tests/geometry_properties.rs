//! Projection, kinematics and grounding properties.

use proptest::prelude::*;
use tabletop_core::config::AppConfig;
use tabletop_core::kinematics::{forward_kinematics, jacobian, solve_ik, ArmModel, IkParams};
use tabletop_core::perception::{oracle_detect, resolve_label, CameraModel, Detection, DetectorDegradation};
use tabletop_core::scene::{step_pick, step_place, PlaceTarget};

fn registry() -> &'static AppConfig {
    static REG: std::sync::OnceLock<AppConfig> = std::sync::OnceLock::new();
    REG.get_or_init(AppConfig::builtin)
}

fn overhead() -> CameraModel {
    registry().camera.clone()
}

/// Camera looking down at an angle, to exercise a non-trivial rotation.
fn tilted() -> CameraModel {
    let (s, c) = (0.3f64.sin(), 0.3f64.cos());
    CameraModel {
        rotation: [[1.0, 0.0, 0.0], [0.0, -c, s], [0.0, -s, -c]],
        translation: [0.05, 0.1, 0.9],
        ..CameraModel::with_intrinsics(610.0, 590.0, 318.0, 244.0)
    }
}

fn fd_jacobian(arm: &ArmModel) -> Vec<[f64; 2]> {
    let h = 1e-6;
    (0..arm.dof())
        .map(|i| {
            let mut p = arm.theta().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            let (xp, yp) = forward_kinematics(&arm.with_theta(&p));
            let (xm, ym) = forward_kinematics(&arm.with_theta(&m));
            [(xp - xm) / (2.0 * h), (yp - ym) / (2.0 * h)]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn pixel_world_round_trip(u in 0.0f64..640.0, v in 0.0f64..480.0, depth in 0.05f64..3.0, tilt in any::<bool>()) {
        let cam = if tilt { tilted() } else { overhead() };
        let p = cam.pixel_to_world(u, v, depth).unwrap();
        let (u2, v2, d2) = cam.world_to_pixel(p).unwrap();
        prop_assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6 && (depth - d2).abs() < 1e-9);
        let q = cam.pixel_to_world(u2, v2, d2).unwrap();
        for k in 0..3 {
            prop_assert!((p[k] - q[k]).abs() <= 1e-6);
        }
    }

    #[test]
    fn jacobian_matches_central_differences(t in prop::collection::vec(-3.0f64..3.0, 2..6),
                                            l in prop::collection::vec(0.05f64..0.4, 6)) {
        let arm = ArmModel::unlimited(l[..t.len()].to_vec(), t).unwrap();
        let j = jacobian(&arm);
        for (i, col) in fd_jacobian(&arm).iter().enumerate() {
            prop_assert!((j[(0, i)] - col[0]).abs() <= 1e-5);
            prop_assert!((j[(1, i)] - col[1]).abs() <= 1e-5);
        }
    }

    #[test]
    fn ik_is_sound_and_respects_limits(x in -0.6f64..0.6, y in -0.6f64..0.6) {
        let arm = registry().arm.home_arm().unwrap();
        let s = solve_ik(&arm, (x, y), IkParams::default()).unwrap();
        let (fx, fy) = forward_kinematics(&arm.with_theta(&s.theta));
        let err = ((fx - x).powi(2) + (fy - y).powi(2)).sqrt();
        prop_assert!((err - s.residual).abs() < 1e-12);
        if s.converged {
            prop_assert!(err <= 1e-4);
        }
        prop_assert!(s.iterations <= 200);
        for (t, (lo, hi)) in s.theta.iter().zip(arm.limits()) {
            prop_assert!(*t >= *lo && *t <= *hi);
        }
    }

    #[test]
    fn workspace_targets_always_converge(x in -0.30f64..=0.30, y in 0.15f64..=0.50) {
        let arm = registry().arm.home_arm().unwrap();
        let s = solve_ik(&arm, (x, y), IkParams::default()).unwrap();
        prop_assert!(s.converged, "({x}, {y}): {:?}", s.diagnostic);
    }

    #[test]
    fn resolve_label_is_deterministic_under_permutation(
        labels in prop::collection::vec(prop::sample::select(vec![
            "red block", "blue block", "red bowl", "apple", "green apple", "metal clip", "box"]), 1..6),
        conf in prop::collection::vec(0.0f64..1.0, 6),
        query in prop::sample::select(vec!["red block", "apple", "iron clip", "block", "red", "banana"]),
        rot in 0usize..6,
    ) {
        let dets: Vec<Detection> = labels.iter().zip(&conf).map(|(l, c)| Detection {
            label: l.to_string(),
            bbox: [0.0, 0.0, 1.0, 1.0],
            depth: 1.0,
            confidence: *c,
            container: false,
            source: None,
        }).collect();
        let syn = &registry().synonyms;
        let a = resolve_label(&dets, query, syn, 0.5).map(|d| (d.label.clone(), d.confidence.to_bits()));
        let mut rotated = dets.clone();
        rotated.rotate_left(rot % dets.len());
        let b = resolve_label(&rotated, query, syn, 0.5).map(|d| (d.label.clone(), d.confidence.to_bits()));
        prop_assert_eq!(a.is_ok(), b.is_ok());
        if let (Ok(a), Ok(b)) = (a, b) {
            // Identical (label, confidence) pairs are interchangeable.
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn degradation_never_touches_unoccluded_objects(scenario in 1u32..=10, seed in 0u64..200,
                                                    miss in 0.0f64..=1.0, mislabel in 0.0f64..=1.0,
                                                    stack in any::<bool>()) {
        let reg = registry();
        let mut scene = reg.make_scenario(scenario, seed).unwrap();
        if stack {
            let ids: Vec<_> = scene.objects.keys().cloned().collect();
            step_pick(&mut scene, &ids[0], 0.0).unwrap();
            step_place(&mut scene, &PlaceTarget::Object { id: ids[1].clone() }).unwrap();
        }
        let deg = DetectorDegradation { miss_prob: miss, occlusion_mislabel_prob: mislabel, box_jitter_px: 2.0, seed };
        let dets = oracle_detect(&scene, &reg.camera, &deg, 0.6).unwrap();
        let occluded: Vec<_> = scene.objects.values()
            .filter(|o| scene.objects.values().any(|p| p.supported_by.as_ref() == Some(&o.id)))
            .map(|o| o.id.clone()).collect();
        for o in scene.objects.values().filter(|o| !occluded.contains(&o.id)) {
            let found: Vec<_> = dets.iter().filter(|d| d.source.as_ref() == Some(&o.id)).collect();
            prop_assert_eq!(found.len(), 1, "{} detected {} times", o.id, found.len());
            prop_assert_eq!(&found[0].label, &o.label);
        }
        for d in &dets {
            prop_assert!(d.bbox[0] >= 0.0 && d.bbox[1] >= 0.0 && d.bbox[2] <= 640.0 && d.bbox[3] <= 480.0);
            prop_assert!(d.depth > 0.0 && (0.0..=1.0).contains(&d.confidence));
        }
        prop_assert_eq!(dets.clone(), oracle_detect(&scene, &reg.camera, &deg, 0.6).unwrap());
    }
}

#[test]
fn worked_projection_examples() {
    let cam = CameraModel::with_intrinsics(600.0, 600.0, 320.0, 240.0);
    assert_eq!(cam.pixel_to_world(320.0, 240.0, 0.5).unwrap(), [0.0, 0.0, 0.5]);
    let p = cam.pixel_to_world(470.0, 240.0, 0.6).unwrap();
    // Oracle: forward projection of (0.15, 0, 0.6) is u = 600 * 0.15 / 0.6 + 320 = 470.
    let (u, v, d) = cam.world_to_pixel([0.15, 0.0, 0.6]).unwrap();
    assert_eq!((u, v, d), (470.0, 240.0, 0.6));
    assert!((p[0] - 0.15).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.6);
    assert!(cam.pixel_to_world(320.0, 240.0, 0.0).is_err());
}

#[test]
fn zero_degradation_bijects_with_unheld_objects() {
    let reg = AppConfig::builtin();
    for scenario in 1..=10 {
        let mut scene = reg.make_scenario(scenario, 5).unwrap();
        let held = scene.objects.keys().next().unwrap().clone();
        step_pick(&mut scene, &held, 0.0).unwrap();
        let dets = oracle_detect(&scene, &reg.camera, &DetectorDegradation::default(), 0.6).unwrap();
        let mut seen: Vec<_> = dets.iter().filter(|d| !d.container).filter_map(|d| d.source.clone()).collect();
        seen.sort();
        let expected: Vec<_> = scene.objects.keys().filter(|k| **k != held).cloned().collect();
        assert_eq!(seen, expected, "scenario {scenario}");
    }
}

#[test]
fn synonym_table_covers_iron_clip() {
    let reg = AppConfig::builtin();
    let det = |l: &str| Detection {
        label: l.into(),
        bbox: [0.0; 4],
        depth: 1.0,
        confidence: 1.0,
        container: false,
        source: None,
    };
    let dets = vec![det("stapler"), det("metal clip"), det("eraser")];
    assert_eq!(resolve_label(&dets, "iron clip", &reg.synonyms, 0.5).unwrap().label, "metal clip");
}
