use super::export::capsule_mesh;
use super::*;
use crate::body::{segment_closest_point, BodyParams, Capsule, NUM_BONES};
use crate::simulate::make_scenario;

fn short(kind: ScenarioKind, duration: f64, cameras: usize) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.scenario = ScenarioConfig { kind, duration, fps: 20.0 };
    c.rig.cameras = cameras;
    c.stages.steps = 10;
    c
}

fn clean(mut c: PipelineConfig) -> PipelineConfig {
    c.observation = ObservationModel::clean();
    c
}

/// Ground truth dressed up as a pipeline output.
fn perfect_output(scenario: &Scenario, template: &BodyTemplate) -> PipelineOutput {
    let keypoints = scenario.keypoints(template).unwrap();
    let poses = (0..NUM_SUBJECTS)
        .map(|s| Pose3DSequence { frames: keypoints.iter().map(|f| PoseFrame::from_keypoints(f[s])).collect() })
        .collect();
    let params: Vec<Vec<BodyParams>> =
        (0..NUM_SUBJECTS).map(|s| scenario.params.iter().map(|f| f[s]).collect()).collect();
    PipelineOutput {
        tracking: Tracking { poses, switch_frame: None, degraded_frames: vec![], assignments: vec![] },
        fit: FitResult { params, traces: vec![], contacts: vec![] },
    }
}

#[test]
fn config_round_trips_through_json() {
    let mut c = PipelineConfig::default();
    c.seed = 42;
    c.gate_radius = 33.5;
    c.weights.w7 = 2.5;
    let back = PipelineConfig::from_json(&c.to_json().unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn partial_config_takes_defaults() {
    let c = PipelineConfig::from_json(r#"{"seed": 7, "rig": {"cameras": 6}}"#).unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.rig.cameras, 6);
    assert_eq!(c.rig.radius, RigConfig::default().radius);
    assert_eq!(c.weights, MeshFitWeights::default());
}

#[test]
fn invalid_config_is_rejected() {
    assert!(PipelineConfig::from_json(r#"{"gate_radius": -1.0}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"observation": {"swap_rate": 1.5}}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"weights": {"w7": -1.0}}"#).is_err());
    assert!(PipelineConfig::from_json("not json").is_err());
}

#[test]
fn seeds_are_mixed_into_substreams() {
    let a = PipelineConfig { seed: 1, ..Default::default() };
    let b = PipelineConfig { seed: 2, ..Default::default() };
    assert_ne!(a.observation_model().seed, b.observation_model().seed);
    assert_ne!(a.observation_model().seed, a.triangulation_config().seed);
    assert_eq!(a.observation_model().seed, a.clone().observation_model().seed);
}

#[test]
fn scene_round_trips_and_validates() {
    let sim = simulate(&short(ScenarioKind::Approach, 0.5, 4)).unwrap();
    let json = sim.scene.to_json().unwrap();
    let back = Scene::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert_eq!(back.frames.len(), 10);
    assert!((back.dt() - 0.05).abs() < 1e-12);
}

#[test]
fn malformed_scenes_are_rejected() {
    let sim = simulate(&short(ScenarioKind::Approach, 0.5, 4)).unwrap();

    let mut s = sim.scene.clone();
    s.frames[3].t = s.frames[2].t;
    assert!(matches!(s.validate(), Err(Error::InvalidInput(_))));

    let mut s = sim.scene.clone();
    s.frames[0].views[0].view_id = 99;
    assert!(matches!(s.validate(), Err(Error::InvalidInput(_))));

    let mut s = sim.scene.clone();
    s.frames.pop();
    assert!(matches!(s.validate(), Err(Error::InvalidInput(_))));

    let mut s = sim.scene;
    s.ground_truth = None;
    s.frames.pop();
    assert!(s.validate().is_ok());
}

#[test]
fn simulation_is_deterministic() {
    let c = short(ScenarioKind::Hug, 0.5, 4);
    let a = simulate(&c).unwrap();
    let b = simulate(&c).unwrap();
    assert_eq!(a.scene.to_json().unwrap(), b.scene.to_json().unwrap());
    assert_eq!(a.sources, b.sources);
    let other = simulate(&PipelineConfig { seed: 1, ..c }).unwrap();
    assert_ne!(a.scene.to_json().unwrap(), other.scene.to_json().unwrap());
}

#[test]
fn tracking_fails_without_both_subjects_in_view() {
    let mut sim = simulate(&short(ScenarioKind::Approach, 0.5, 4)).unwrap();
    for v in &mut sim.scene.frames[0].views {
        v.persons.truncate(1);
    }
    let err = track(&sim.scene, &short(ScenarioKind::Approach, 0.5, 4)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn clean_tracking_follows_both_subjects() {
    let c = clean(short(ScenarioKind::Hug, 3.0, 8));
    let sim = simulate(&c).unwrap();
    let tracking = track(&sim.scene, &c).unwrap();
    let truth = ground_truth_keypoints(&sim.scene, &c.template()).unwrap();
    assert_eq!(tracking.poses.len(), 2);
    assert_eq!(tracking.assignments.len(), truth.len());
    let mpjpe = tracking_mpjpe(&tracking.poses, &truth).unwrap();
    assert!(mpjpe < 10.0, "mpjpe {mpjpe} mm");
    let switch = tracking.switch_frame.expect("the hug brings the subjects together");
    assert!(switch >= HISTORY_LEN);
    let map = match_subjects(&tracking.poses, &truth).unwrap();
    let accuracy = identity_accuracy(&tracking, &sim.sources, &map).unwrap();
    assert!(accuracy > 0.999, "accuracy {accuracy}");
}

#[test]
fn subjects_are_matched_through_a_relabeling() {
    let template = BodyTemplate::default();
    let scenario = make_scenario(ScenarioKind::Approach, 0.5, 20.0, 3).unwrap();
    let mut out = perfect_output(&scenario, &template);
    let truth = scenario.keypoints(&template).unwrap();
    assert_eq!(match_subjects(&out.tracking.poses, &truth).unwrap(), vec![0, 1]);
    out.tracking.poses.swap(0, 1);
    assert_eq!(match_subjects(&out.tracking.poses, &truth).unwrap(), vec![1, 0]);
    assert!(tracking_mpjpe(&out.tracking.poses, &truth).unwrap() < 1e-9);
}

#[test]
fn perfect_output_scores_perfectly() {
    let c = short(ScenarioKind::Approach, 0.5, 4);
    let sim = simulate(&c).unwrap();
    let gt = sim.scene.ground_truth.clone().unwrap();
    let report = evaluate(&perfect_output(&gt, &c.template()), &sim.scene, &c).unwrap();
    for v in [report.mpjpe, report.pa_mpjpe, report.n_mpjpe, report.pve, report.pa_pve, report.n_pve] {
        assert!(v.abs() < 1e-6, "{v}");
    }
    assert_eq!(report.pck3d, 100.0);
    assert_eq!(report.f1, 1.0);
    assert_eq!(report.subjects.len(), 2);
    assert_eq!(report.traces.mpjpe.len(), 10);
}

#[test]
fn translated_output_scores_as_the_offset() {
    let c = short(ScenarioKind::Approach, 0.5, 4);
    let sim = simulate(&c).unwrap();
    let gt = sim.scene.ground_truth.clone().unwrap();
    let mut out = perfect_output(&gt, &c.template());
    // shift every fitted body 30 mm sideways; rooted errors cancel it, the
    // detection metrics see it in full
    for track in &mut out.fit.params {
        for p in track.iter_mut() {
            p.global_transl[0] += 0.03;
        }
    }
    let report = evaluate(&out, &sim.scene, &c).unwrap();
    assert!(report.mpjpe < 1e-6 && report.pve < 1e-6);
    assert_eq!(report.pck3d, 100.0);
    let tight = PipelineConfig { pck_threshold_mm: 25.0, ..c.clone() };
    assert_eq!(evaluate(&out, &sim.scene, &tight).unwrap().pck3d, 0.0);
}

#[test]
fn evaluation_needs_ground_truth() {
    let c = short(ScenarioKind::Approach, 0.5, 4);
    let sim = simulate(&c).unwrap();
    let out = perfect_output(sim.scene.ground_truth.as_ref().unwrap(), &c.template());
    let mut scene = sim.scene;
    scene.ground_truth = None;
    assert!(matches!(evaluate(&out, &scene, &c), Err(Error::NoGroundTruth)));
}

/// Closed, consistently oriented, outward-facing.
fn check_closed_mesh(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> f64 {
    use std::collections::HashMap;
    let mut edges: HashMap<(usize, usize), i32> = HashMap::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            assert_ne!(a, b, "degenerate face");
            *edges.entry((a, b)).or_default() += 1;
        }
    }
    for (&(a, b), &n) in &edges {
        assert_eq!(n, 1, "directed edge used twice");
        assert_eq!(edges.get(&(b, a)), Some(&1), "edge without its twin");
    }
    let euler = vertices.len() as i64 - (edges.len() / 2) as i64 + faces.len() as i64;
    assert_eq!(euler, 2);
    faces.iter().map(|f| vertices[f[0]].dot(&vertices[f[1]].cross(&vertices[f[2]])) / 6.0).sum()
}

#[test]
fn capsule_mesh_is_a_closed_outward_surface() {
    let c = Capsule { a: Vector3::new(0.1, -0.2, 0.3), b: Vector3::new(0.4, 0.1, 0.2), radius: 0.05 };
    let (vertices, faces) = capsule_mesh(&c);
    let volume = check_closed_mesh(&vertices, &faces);
    let r = c.radius;
    let exact = std::f64::consts::PI * r * r * ((c.b - c.a).norm() + 4.0 / 3.0 * r);
    // an inscribed tessellation: slightly smaller than the true capsule
    assert!(volume > 0.9 * exact && volume < exact, "volume {volume} vs {exact}");
    for v in &vertices {
        let (_, q) = segment_closest_point(v, &c.a, &c.b);
        assert!(((v - q).norm() - r).abs() < 1e-12);
    }
}

#[test]
fn zero_length_capsule_meshes_as_a_sphere() {
    let c = Capsule { a: Vector3::zeros(), b: Vector3::zeros(), radius: 0.1 };
    let (vertices, faces) = capsule_mesh(&c);
    let volume = check_closed_mesh(&vertices, &faces);
    assert!(volume > 0.0 && volume < 4.0 / 3.0 * std::f64::consts::PI * 1e-3);
}

#[test]
fn obj_export_has_one_group_per_bone() {
    let template = BodyTemplate::default();
    let scenario = make_scenario(ScenarioKind::Approach, 0.5, 20.0, 0).unwrap();
    let obj = export_obj(&template, &scenario.params[0]).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("o ")).count(), 2);
    assert_eq!(obj.lines().filter(|l| l.starts_with("g ")).count(), 2 * NUM_BONES);
    let n_vertices = obj.lines().filter(|l| l.starts_with("v ")).count();
    for l in obj.lines().filter(|l| l.starts_with("f ")) {
        for i in l.split_whitespace().skip(1) {
            let i: usize = i.parse().unwrap();
            assert!(i >= 1 && i <= n_vertices);
        }
    }
}

#[test]
fn atomic_writes_replace_whole_files() {
    let dir = std::env::temp_dir().join(format!("contactcap-atomic-{}", std::process::id()));
    let path = dir.join("nested").join("out.json");
    write_atomic(&path, b"first").unwrap();
    write_atomic(&path, b"second").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"second");
    let leftovers = std::fs::read_dir(path.parent().unwrap()).unwrap().count();
    assert_eq!(leftovers, 1);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn camera_ablation_checks_counts() {
    let c = short(ScenarioKind::Approach, 0.5, 6);
    let scenario = make_scenario(ScenarioKind::Approach, 0.5, 20.0, 0).unwrap();
    assert!(matches!(ablate_cameras(&scenario, &[1], &c), Err(Error::InvalidParameter(_))));
    assert!(matches!(ablate_cameras(&scenario, &[7], &c), Err(Error::InvalidParameter(_))));
    let rows = ablate_cameras(&scenario, &[2, 6], &c).unwrap();
    assert_eq!(rows.iter().map(|r| r.cameras).collect::<Vec<_>>(), vec![2, 6]);
    for r in &rows {
        assert!(r.mpjpe.map_or(r.error.is_some(), f64::is_finite), "{r:?}");
    }
    assert!(rows[1].mpjpe.unwrap() < 50.0);
}

#[test]
fn collision_ablation_without_contact_is_zero() {
    let c = short(ScenarioKind::Circle, 1.0, 6);
    let sim = simulate(&c).unwrap();
    let ablation = ablate_collision(&sim.scene, &c).unwrap();
    assert_eq!(ablation.rows.len(), 2);
    assert!(!ablation.rows[0].collision_loss && ablation.rows[1].collision_loss);
    for r in &ablation.rows {
        assert_eq!((r.mp2s, r.miou, r.mioa), (0.0, 0.0, 0.0));
    }
    assert_eq!(ablation.csv().lines().count(), 3);
}

#[test]
fn pipeline_runs_are_reproducible() {
    let c = short(ScenarioKind::Hug, 1.0, 6);
    let sim = simulate(&c).unwrap();
    let a = run_pipeline(&sim.scene, &c).unwrap();
    let b = run_pipeline(&sim.scene, &c).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.fit.params.len(), 2);
    assert_eq!(a.fit.params[0].len(), 20);
}
