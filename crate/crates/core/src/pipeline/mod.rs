//! End-to-end capture: scene files, configuration, the tracking loop, body
//! fitting, evaluation against ground truth, and the two ablation studies.
//!
//! Tracking runs in two phases. While the subjects are apart, detections are
//! grouped per view by mutual-nearest matching against the previous frame's
//! projections and triangulated directly. Once any two keypoints of different
//! subjects come within [`PipelineConfig::switch_distance`], per-keypoint
//! Kalman filters are started from the trailing refined frames and every
//! later frame goes through forecast, projection, gating, RANSAC
//! triangulation and filter update, strictly in time order.

mod ablate;
mod associate;
mod evaluate;
mod export;

#[cfg(test)]
mod tests;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::forecast::{FilterConfig, TrackedSubject, HISTORY_LEN};
use crate::geometry::CameraRig;
use crate::meshfit::{fit_sequence, initialize, FitResult, FitStages, MeshFitWeights, ShapePrior};
use crate::observe::{gate_associate, scale_pixels, synth_detect, Detections2D, ObservationModel};
use crate::par;
use crate::simulate::{make_rig, make_scenario_with, Scenario, ScenarioKind};
use crate::triangulate::{
    ransac_triangulate, refine_sequence, stream_seed, Observation, Pose3DSequence, PoseFrame, RefineWeights,
    TriangulationConfig,
};

pub use ablate::{ablate_cameras, ablate_collision, CameraAblationRow, CollisionAblation, CollisionRow};
pub use evaluate::{evaluate, ground_truth_keypoints, match_subjects, tracking_mpjpe};
pub use export::{export_obj, write_atomic};

/// Both subjects are tracked throughout.
pub const NUM_SUBJECTS: usize = 2;

/// Scenario used by `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub duration: f64,
    pub fps: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { kind: ScenarioKind::Hug, duration: 5.0, fps: 20.0 }
    }
}

/// Camera ring used by `simulate` and the camera ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub cameras: usize,
    pub radius: f64,
    pub height: f64,
    pub resolution: [u32; 2],
}

impl Default for RigConfig {
    fn default() -> Self {
        Self { cameras: 20, radius: 4.0, height: 1.6, resolution: [3840, 2160] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub rig: RigConfig,
    pub observation: ObservationModel,
    pub filter: FilterConfig,
    /// Gate radius in pixels at the 3840 px reference width.
    pub gate_radius: f64,
    pub triangulation: TriangulationConfig,
    pub refine: RefineWeights,
    pub weights: MeshFitWeights,
    pub prior: ShapePrior,
    pub stages: FitStages,
    /// Surface samples per body.
    pub vertex_count: usize,
    /// Forecast-gated tracking starts once keypoints of different subjects
    /// come this close (m).
    pub switch_distance: f64,
    /// Post-contact filters are restarted from refined frames this often.
    pub reseed_interval: usize,
    pub contact_eps: f64,
    pub pck_threshold_mm: f64,
    pub voxel_size: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: ScenarioConfig::default(),
            rig: RigConfig::default(),
            observation: ObservationModel::default(),
            filter: FilterConfig::default(),
            gate_radius: 50.0,
            triangulation: TriangulationConfig::default(),
            refine: RefineWeights::default(),
            weights: MeshFitWeights::default(),
            prior: ShapePrior::default(),
            stages: FitStages::default(),
            vertex_count: crate::body::DEFAULT_VERTEX_COUNT,
            switch_distance: 0.5,
            reseed_interval: 20,
            contact_eps: 0.01,
            pck_threshold_mm: crate::metrics::PCK_THRESHOLD_MM,
            voxel_size: crate::metrics::DEFAULT_VOXEL,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.observation.validate()?;
        self.filter.validate()?;
        self.triangulation.validate()?;
        self.refine.validate()?;
        self.weights.validate()?;
        self.prior.validate()?;
        self.stages.validate()?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.gate_radius)
            || !positive(self.switch_distance)
            || !positive(self.contact_eps)
            || !positive(self.pck_threshold_mm)
            || !positive(self.voxel_size)
        {
            return Err(Error::InvalidParameter("radii, distances and thresholds must be positive".into()));
        }
        if self.vertex_count == 0 || self.reseed_interval == 0 {
            return Err(Error::InvalidParameter("vertex_count and reseed_interval must be positive".into()));
        }
        if !(positive(self.scenario.duration) && positive(self.scenario.fps)) {
            return Err(Error::InvalidParameter("scenario duration and fps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn template(&self) -> BodyTemplate {
        BodyTemplate::standard(self.vertex_count)
    }

    /// Observation model with its seed mixed into the run seed.
    pub fn observation_model(&self) -> ObservationModel {
        ObservationModel { seed: stream_seed(self.seed, &[1, self.observation.seed]), ..self.observation }
    }

    /// Triangulation settings with their seed mixed into the run seed.
    pub fn triangulation_config(&self) -> TriangulationConfig {
        TriangulationConfig { seed: stream_seed(self.seed, &[2, self.triangulation.seed]), ..self.triangulation }
    }

    /// Fit weights with the collision term switched off.
    pub fn without_collision(&self) -> Self {
        Self { weights: MeshFitWeights { w7: 0.0, ..self.weights }, ..self.clone() }
    }
}

/// All views of one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub t: f64,
    pub views: Vec<Detections2D>,
}

/// A calibrated multi-view recording of detections, optionally with the
/// motion that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub rig: CameraRig,
    pub frames: Vec<SceneFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Scenario>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            if !f.t.is_finite() {
                return Err(Error::InvalidInput(format!("frame {i} has a non-finite timestamp")));
            }
            if i > 0 && f.t <= self.frames[i - 1].t {
                return Err(Error::InvalidInput(format!("timestamps must increase strictly (frame {i})")));
            }
            for v in &f.views {
                if self.rig.camera(v.view_id).is_none() {
                    return Err(Error::InvalidInput(format!("frame {i} refers to unknown view {}", v.view_id)));
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            gt.validate()?;
            if gt.frame_count() != self.frames.len() {
                return Err(Error::InvalidInput(format!(
                    "ground truth has {} frames, scene has {}",
                    gt.frame_count(),
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Time between frames, from the rig's frame rate.
    pub fn dt(&self) -> f64 {
        1.0 / self.rig.frame_rate
    }
}

/// A synthesized scene and, per frame, the true subject of every detected
/// keypoint (`sources[frame][view][candidate][keypoint]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScene {
    pub scene: Scene,
    pub sources: Vec<Vec<Vec<[Option<usize>; NUM_KEYPOINTS]>>>,
}

/// Generates the configured scenario, rig and corrupted detections.
pub fn simulate(config: &PipelineConfig) -> Result<SimulatedScene> {
    config.validate()?;
    let rig = make_rig(
        config.rig.cameras,
        config.rig.radius,
        config.rig.height,
        (config.rig.resolution[0], config.rig.resolution[1]),
        config.scenario.fps,
    )?;
    let template = config.template();
    let scenario = make_scenario_with(
        config.scenario.kind,
        config.scenario.duration,
        config.scenario.fps,
        config.seed,
        &template,
        config.contact_eps,
    )?;
    simulate_with(config, scenario, rig)
}

/// Renders detections of `scenario` as seen by `rig`.
pub fn simulate_with(config: &PipelineConfig, scenario: Scenario, rig: CameraRig) -> Result<SimulatedScene> {
    let template = config.template();
    let model = config.observation_model();
    let keypoints = scenario.keypoints(&template)?;
    let synth = par::map_range(keypoints.len(), |f| synth_detect(&keypoints[f], &template, &rig, &model, f));
    let mut frames = Vec::with_capacity(synth.len());
    let mut sources = Vec::with_capacity(synth.len());
    for (f, s) in synth.into_iter().enumerate() {
        let s = s?;
        frames.push(SceneFrame { t: f as f64 / scenario.fps, views: s.views });
        sources.push(s.sources);
    }
    Ok(SimulatedScene { scene: Scene { rig, frames, ground_truth: Some(scenario) }, sources })
}

/// `[subject][view][keypoint]`: candidate index within the view, if any.
pub type FrameAssignment = Vec<Vec<[Option<usize>; NUM_KEYPOINTS]>>;

/// Keypoint tracks before body fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracking {
    /// Refined tracks, one per subject.
    pub poses: Vec<Pose3DSequence>,
    /// First frame handled by the forecast-gated loop; `None` if the
    /// subjects never came close.
    pub switch_frame: Option<usize>,
    /// Frames where some keypoint had fewer than the minimum number of views
    /// and was carried by its forecast (or by the previous frame).
    pub degraded_frames: Vec<usize>,
    /// Per frame, the detection behind each subject keypoint in each view:
    /// RANSAC inliers before the switch, gated assignments after it.
    pub assignments: Vec<FrameAssignment>,
}

/// Tracks plus the fitted bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub tracking: Tracking,
    pub fit: FitResult,
}

impl PipelineOutput {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Observations of one subject keypoint: `(view index, candidate, pixel)`.
type KeypointViews = Vec<(usize, usize, Vector2<f64>)>;

/// RANSAC-triangulates one keypoint; the inlier views are recorded in `assigned`.
fn triangulate_keypoint(
    rig: &CameraRig,
    views: &[usize],
    obs: &KeypointViews,
    cfg: &TriangulationConfig,
    key: u64,
    assigned: &mut [[Option<usize>; NUM_KEYPOINTS]],
    joint: usize,
) -> Option<(Vector3<f64>, usize)> {
    let observations: Vec<Observation<'_>> =
        obs.iter().map(|(v, _, uv)| Observation { camera: &rig.cameras[views[*v]], pixel: *uv }).collect();
    let r = ransac_triangulate(&observations, cfg, key).ok()?;
    for &i in &r.inliers {
        let (v, c, _) = obs[i];
        assigned[v][joint] = Some(c);
    }
    Some((r.point, r.inliers.len()))
}

/// Index of each detection's camera within the rig.
fn view_indices(scene: &Scene, frame: &SceneFrame) -> Result<Vec<usize>> {
    frame
        .views
        .iter()
        .map(|v| {
            scene
                .rig
                .cameras
                .iter()
                .position(|c| c.id == v.view_id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown view {}", v.view_id)))
        })
        .collect()
}

fn closest_keypoint_distance(a: &PoseFrame, b: &PoseFrame) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..NUM_KEYPOINTS {
        for j in 0..NUM_KEYPOINTS {
            if a.valid[i] && b.valid[j] {
                best = best.min((a.keypoints[i] - b.keypoints[j]).norm());
            }
        }
    }
    best
}

/// Runs both tracking phases over the scene and refines the tracks.
pub fn track(scene: &Scene, config: &PipelineConfig) -> Result<Tracking> {
    config.validate()?;
    scene.validate()?;
    let n_frames = scene.frames.len();
    if n_frames < HISTORY_LEN {
        return Err(Error::InsufficientHistory { got: n_frames, need: HISTORY_LEN });
    }
    let tri = config.triangulation_config();
    let dt = scene.dt();
    let mut raw: Vec<Vec<PoseFrame>> = vec![Vec::with_capacity(n_frames); NUM_SUBJECTS];
    let mut assignments = Vec::with_capacity(n_frames);
    let mut degraded = Vec::new();
    let mut switch_frame = None;
    let mut last = [associate::LastPose::default(); NUM_SUBJECTS];

    // pre-contact: identities from image-space proximity to the previous frame
    for (t, frame) in scene.frames.iter().enumerate() {
        let views = view_indices(scene, frame)?;
        if frame.views.iter().all(|v| v.persons.is_empty()) {
            return Err(Error::Pipeline(format!("frame {t} has no detections")));
        }
        let groups = if t == 0 {
            associate::bootstrap(scene, &views, &frame.views)?
        } else {
            associate::mutual_nearest(scene, &views, &frame.views, &last)
        };
        let mut frame_assign = vec![vec![[None; NUM_KEYPOINTS]; views.len()]; NUM_SUBJECTS];
        let mut short = false;
        for s in 0..NUM_SUBJECTS {
            let mut pose = PoseFrame {
                keypoints: last[s].keypoints,
                valid: [false; NUM_KEYPOINTS],
                inliers: [0; NUM_KEYPOINTS],
            };
            for j in 0..NUM_KEYPOINTS {
                let obs: KeypointViews = (0..views.len())
                    .filter_map(|v| {
                        let c = groups[s][v]?;
                        let k = frame.views[v].persons[c].keypoints[j];
                        k.visible.then_some((v, c, k.uv))
                    })
                    .collect();
                let key = stream_seed(tri.seed, &[t as u64, s as u64, j as u64]);
                match triangulate_keypoint(&scene.rig, &views, &obs, &tri, key, &mut frame_assign[s], j) {
                    Some((p, n)) => {
                        pose.keypoints[j] = p;
                        pose.valid[j] = true;
                        pose.inliers[j] = n;
                    }
                    None => short = true,
                }
            }
            last[s].update(&pose);
            raw[s].push(pose);
        }
        if short {
            degraded.push(t);
        }
        assignments.push(frame_assign);
        if t + 1 >= HISTORY_LEN && closest_keypoint_distance(&raw[0][t], &raw[1][t]) < config.switch_distance {
            switch_frame = Some(t + 1);
            break;
        }
    }

    if let Some(start) = switch_frame.filter(|&s| s < n_frames) {
        let mut subjects = reseed(&raw, start, dt, scene.frames[start - 1].t, config)?;
        for t in start..n_frames {
            if (t - start) > 0 && (t - start) % config.reseed_interval == 0 {
                subjects = reseed(&raw, t, dt, scene.frames[t - 1].t, config)?;
            }
            let frame = &scene.frames[t];
            let views = view_indices(scene, frame)?;
            if frame.views.iter().all(|v| v.persons.is_empty()) {
                return Err(Error::Pipeline(format!("frame {t} has no detections")));
            }
            let forecasts: Vec<[Vector3<f64>; NUM_KEYPOINTS]> = subjects.iter_mut().map(|s| s.predict()).collect();
            let mut frame_assign = vec![vec![[None; NUM_KEYPOINTS]; views.len()]; NUM_SUBJECTS];
            let mut per_view = Vec::with_capacity(views.len());
            for (v, det) in frame.views.iter().enumerate() {
                let camera = &scene.rig.cameras[views[v]];
                let projected: Vec<Vec<Option<[Vector2<f64>; NUM_KEYPOINTS]>>> = forecasts
                    .iter()
                    .map(|f| {
                        let mut out = [Vector2::zeros(); NUM_KEYPOINTS];
                        for j in 0..NUM_KEYPOINTS {
                            match camera.project(&f[j]) {
                                Ok(uv) => out[j] = uv,
                                Err(_) => return vec![None],
                            }
                        }
                        vec![Some(out)]
                    })
                    .collect();
                let radius = scale_pixels(config.gate_radius, camera.width);
                per_view.push(gate_associate(&projected, std::slice::from_ref(det), radius));
            }
            let mut short = false;
            let mut scratch = vec![[None; NUM_KEYPOINTS]; views.len()];
            for (s, subject) in subjects.iter_mut().enumerate() {
                let mut pose = PoseFrame {
                    keypoints: forecasts[s],
                    valid: [false; NUM_KEYPOINTS],
                    inliers: [0; NUM_KEYPOINTS],
                };
                for j in 0..NUM_KEYPOINTS {
                    let obs: KeypointViews = per_view
                        .iter()
                        .enumerate()
                        .filter(|(_, a)| a.valid[s][0][j])
                        .map(|(v, a)| (v, a.candidate[s][0][j].expect("valid keypoints have a candidate"), a.keypoints[s][0][j]))
                        .collect();
                    for &(v, c, _) in &obs {
                        frame_assign[s][v][j] = Some(c);
                    }
                    let key = stream_seed(tri.seed, &[t as u64, s as u64, j as u64]);
                    match triangulate_keypoint(&scene.rig, &views, &obs, &tri, key, &mut scratch, j) {
                        Some((p, n)) => {
                            pose.keypoints[j] = p;
                            pose.valid[j] = true;
                            pose.inliers[j] = n;
                        }
                        None => short = true,
                    }
                }
                subject.update(&pose.keypoints, &pose.valid)?;
                raw[s].push(pose);
            }
            if short {
                degraded.push(t);
            }
            assignments.push(frame_assign);
        }
    }

    let poses = raw
        .iter()
        .map(|frames| refine_sequence(&Pose3DSequence { frames: frames.clone() }, &config.refine))
        .collect::<Result<Vec<_>>>()?;
    for p in &poses {
        if p.frames.iter().flat_map(|f| f.keypoints.iter()).any(|k| !k.iter().all(|v| v.is_finite())) {
            return Err(Error::Pipeline("tracking diverged to non-finite keypoints".into()));
        }
    }
    Ok(Tracking { poses, switch_frame, degraded_frames: degraded, assignments })
}

/// Starts fresh filters from the refined trailing window ending before `end`.
fn reseed(
    raw: &[Vec<PoseFrame>],
    end: usize,
    dt: f64,
    end_time: f64,
    config: &PipelineConfig,
) -> Result<Vec<TrackedSubject>> {
    let start = end.saturating_sub(HISTORY_LEN);
    raw.iter()
        .enumerate()
        .map(|(s, frames)| {
            let window = refine_sequence(&Pose3DSequence { frames: frames[start..end].to_vec() }, &config.refine)?;
            TrackedSubject::init_from_history(s, &window.keypoints(), dt, end_time, &config.filter)
        })
        .collect()
}

/// Fits bodies to tracked keypoints.
pub fn fit(tracking: &Tracking, config: &PipelineConfig) -> Result<FitResult> {
    config.validate()?;
    let template = config.template();
    let init = par::map(&tracking.poses, |seq| initialize(&template, seq));
    let init = init.into_iter().collect::<Result<Vec<_>>>()?;
    fit_sequence(&template, &tracking.poses, &init, &config.weights, &config.prior, &config.stages)
}

/// Tracking followed by body fitting.
pub fn run_pipeline(scene: &Scene, config: &PipelineConfig) -> Result<PipelineOutput> {
    let tracking = track(scene, config)?;
    let fit = fit(&tracking, config)?;
    Ok(PipelineOutput { tracking, fit })
}

/// Fraction of gated keypoint assignments from the switch frame on whose
/// detection came from the matching true subject. `subject_map[s]` is the
/// true subject tracked as `s`.
pub fn identity_accuracy(
    tracking: &Tracking,
    sources: &[Vec<Vec<[Option<usize>; NUM_KEYPOINTS]>>],
    subject_map: &[usize],
) -> Option<f64> {
    let start = tracking.switch_frame?;
    let (mut good, mut total) = (0usize, 0usize);
    for t in start..tracking.assignments.len().min(sources.len()) {
        for (s, views) in tracking.assignments[t].iter().enumerate() {
            for (v, joints) in views.iter().enumerate() {
                for (j, c) in joints.iter().enumerate() {
                    let Some(c) = c else { continue };
                    total += 1;
                    if sources[t][v][*c][j] == Some(subject_map[s]) {
                        good += 1;
                    }
                }
            }
        }
    }
    (total > 0).then(|| good as f64 / total as f64)
}
