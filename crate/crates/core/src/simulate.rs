//! Camera rigs and procedurally animated two-person scenarios.
//!
//! Poses are authored as target directions for a handful of bones in each
//! subject's heading frame (x right, y forward, z up) and converted to local
//! rotations by swinging each bone from its rest direction. Every timeline is
//! a blend of smootherstep ramps and sinusoids, so trajectories are C² in time.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{
    forward_kinematics, pelvis, rotation, BodyParams, BodyTemplate, PosedBody, NUM_KEYPOINTS, NUM_SHAPE, PARENTS,
};
use crate::error::{Error, Result};
use crate::geometry::{rotation_between, CameraRig, CameraView};
use crate::par;

/// Point every camera looks at (subject mid-height).
pub const LOOK_AT_HEIGHT: f64 = 1.0;
/// Height of the standing pelvis above the floor.
pub const PELVIS_HEIGHT: f64 = 0.92;

/// Equidistant cameras on a horizontal circle, all aimed at the circle's axis
/// at subject mid-height, with a 90° horizontal field of view.
pub fn make_rig(n_cameras: usize, radius: f64, height: f64, resolution: (u32, u32), fps: f64) -> Result<CameraRig> {
    if n_cameras < 2 {
        return Err(Error::InvalidRig(format!("need at least 2 cameras, got {n_cameras}")));
    }
    if !(radius > 0.0) || resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::InvalidRig("radius and resolution must be positive".into()));
    }
    let target = Vector3::new(0.0, 0.0, LOOK_AT_HEIGHT);
    let up = Vector3::z();
    let cameras = (0..n_cameras)
        .map(|i| {
            let a = TAU * i as f64 / n_cameras as f64;
            let c = Vector3::new(radius * a.cos(), radius * a.sin(), height);
            CameraView::look_at(i as u32, c, target, up, resolution.0 as f64 / 2.0, resolution)
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cameras, fps, up)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Approach,
    Hug,
    Push,
    Circle,
    Grapple,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] =
        [ScenarioKind::Approach, ScenarioKind::Hug, ScenarioKind::Push, ScenarioKind::Circle, ScenarioKind::Grapple];
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approach" => Ok(Self::Approach),
            "hug" => Ok(Self::Hug),
            "push" => Ok(Self::Push),
            "circle" => Ok(Self::Circle),
            "grapple" => Ok(Self::Grapple),
            other => Err(Error::InvalidScenario(format!("unknown scenario kind '{other}'"))),
        }
    }
}

/// Ground-truth motion of two subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub duration: f64,
    pub fps: f64,
    pub seed: u64,
    /// `params[frame][subject]`.
    pub params: Vec<Vec<BodyParams>>,
    pub first_contact_frame: Option<usize>,
}

impl Scenario {
    pub fn frame_count(&self) -> usize {
        self.params.len()
    }

    pub fn subject_count(&self) -> usize {
        self.params.first().map_or(0, |f| f.len())
    }

    /// `keypoints[frame][subject]`.
    pub fn keypoints(&self, template: &BodyTemplate) -> Result<Vec<Vec<[Vector3<f64>; NUM_KEYPOINTS]>>> {
        self.params.iter().map(|f| f.iter().map(|p| forward_kinematics(template, p)).collect()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::InvalidScenario("fps must be positive".into()));
        }
        for f in &self.params {
            for p in f {
                p.validate()?;
            }
        }
        Ok(())
    }
}

/// Smootherstep on [0, 1], clamped outside.
pub fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (x * 6.0 - 15.0) + 10.0)
}

const HUG_STANDOFF: f64 = 0.05;
const HUG_LATERAL: f64 = 0.03;

/// Hug arm directions in the body frame, `[subject][left, right][upper, fore]`.
const HUG_ARMS: [[[[f64; 3]; 2]; 2]; 2] = [
    [[[-1.00, 0.55, 0.30], [0.15, 1.00, 0.00]], [[1.00, 0.55, 0.30], [-0.15, 1.00, 0.00]]],
    [[[-1.00, 0.50, -0.45], [0.15, 1.00, 0.10]], [[1.00, 0.50, -0.45], [-0.15, 1.00, 0.10]]],
];

fn ramp(t: f64, start: f64, end: f64) -> f64 {
    smootherstep((t - start) / (end - start))
}

/// Bone targets in the heading frame, keyed by child keypoint.
#[derive(Debug, Clone, Default)]
struct PoseSpec {
    targets: Vec<(usize, Vector3<f64>)>,
}

impl PoseSpec {
    fn set(&mut self, joint: usize, dir: Vector3<f64>) {
        let dir = dir.normalize();
        match self.targets.iter_mut().find(|(j, _)| *j == joint) {
            Some(t) => t.1 = dir,
            None => self.targets.push((joint, dir)),
        }
    }

    /// Left-side target and its mirror image on the right.
    fn set_pair(&mut self, left: usize, dir: Vector3<f64>) {
        self.set(left, dir);
        self.set(left + 1, Vector3::new(-dir.x, dir.y, dir.z));
    }

    fn get(&self, joint: usize) -> Option<Vector3<f64>> {
        self.targets.iter().find(|(j, _)| *j == joint).map(|t| t.1)
    }
}

/// Blends unit directions by normalized linear interpolation.
fn blend(a: &Vector3<f64>, b: &Vector3<f64>, w: f64) -> Vector3<f64> {
    (a * (1.0 - w) + b * w).normalize()
}

/// Local rotations that swing each targeted bone onto its target.
fn pose_from_spec(template: &BodyTemplate, root: &Matrix3<f64>, spec: &PoseSpec) -> [[f64; 6]; 16] {
    let mut frames = [Matrix3::identity(); NUM_KEYPOINTS];
    frames[0] = *root;
    let mut pose = [rotation::IDENTITY_6D; 16];
    for j in 1..NUM_KEYPOINTS {
        let p = PARENTS[j].unwrap();
        frames[j] = match spec.get(j) {
            Some(d) => {
                let natural = frames[p] * template.rest_direction(j);
                rotation_between(&natural, &(root * d)) * frames[p]
            }
            None => frames[p],
        };
        pose[j - 1] = rotation::encode(&(frames[p].transpose() * frames[j]));
    }
    pose
}

/// Places a posed body so its pelvis lands on `pelvis_at`.
fn place(
    template: &BodyTemplate,
    shape: &[f64; NUM_SHAPE],
    heading: f64,
    pelvis_at: Vector3<f64>,
    spec: &PoseSpec,
) -> BodyParams {
    // heading is the world angle of the subject's forward axis
    let root = Rotation3::from_axis_angle(&Vector3::z_axis(), heading - FRAC_PI_2).into_inner();
    let mut p = BodyParams::rest();
    p.shape = *shape;
    p.global_orient = rotation::encode(&root);
    p.pose = pose_from_spec(template, &root, spec);
    let kp = forward_kinematics(template, &p).expect("authored pose is valid");
    let t = pelvis_at - pelvis(&kp);
    p.global_transl = [t.x, t.y, t.z];
    p
}

fn rest_dir(template: &BodyTemplate, j: usize) -> Vector3<f64> {
    template.rest_direction(j)
}

/// Leg swing for walking; `phase` in radians, `amount` in [0, 1].
fn walk_legs(spec: &mut PoseSpec, phase: f64, amount: f64) {
    for (hip_child, knee_child, sign) in [(13, 15, 1.0), (14, 16, -1.0)] {
        let swing = 0.35 * amount * sign * phase.sin();
        let bend = 0.5 * amount * (1.0 - (phase + sign * FRAC_PI_2).cos()) / 2.0;
        spec.set(hip_child, Vector3::new(0.0, swing.sin(), -swing.cos()));
        spec.set(knee_child, Vector3::new(0.0, (swing - bend).sin(), -(swing - bend).cos()));
    }
}

/// Seeded variation shared by the built-in scenarios.
struct Variation {
    scene_angle: f64,
    offset: Vector3<f64>,
    shapes: [[f64; NUM_SHAPE]; 2],
    squeeze: f64,
    phase: f64,
    tempo: f64,
}

impl Variation {
    fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = || {
            let mut s = [0.0; NUM_SHAPE];
            for (k, v) in s.iter_mut().enumerate() {
                // girth only shows in the surface, not in keypoints: keep it modest
                let spread = if matches!(k, 1 | 9) { 0.3 } else { 1.0 };
                *v = rng.gen_range(-spread..spread);
            }
            s
        };
        let shapes = [shape(), shape()];
        Self {
            scene_angle: rng.gen_range(0.0..TAU),
            offset: Vector3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), 0.0),
            shapes,
            squeeze: rng.gen_range(0.008..0.015),
            phase: rng.gen_range(0.0..TAU),
            tempo: rng.gen_range(0.9..1.1),
        }
    }

    fn world(&self, local: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.scene_angle.sin_cos();
        Vector3::new(c * local.x - s * local.y, s * local.x + c * local.y, local.z) + self.offset
    }
}

/// Pelvis distance at which the fronts of two zero-shape torsos touch.
fn torso_contact_distance(template: &BodyTemplate) -> f64 {
    // torso capsules are bones 10 and 11 (shoulder to hip)
    template.bones[10].base_radius * 2.0
}

struct Frame {
    /// Pelvis position of each subject in the scene frame (before the seeded rotation).
    pelvis: [Vector3<f64>; 2],
    /// Heading of each subject in the scene frame.
    heading: [f64; 2],
    spec: [PoseSpec; 2],
}

fn author(kind: ScenarioKind, template: &BodyTemplate, var: &Variation, t: f64) -> Frame {
    let touch = torso_contact_distance(template);
    let mut spec = [PoseSpec::default(), PoseSpec::default()];
    // start 3 m apart, facing each other along the scene x axis
    let start = 1.5;
    let half;
    let mut heading = [0.0, PI];
    let mut lateral = [0.0, 0.0];
    let z = PELVIS_HEIGHT;
    let arms_rest = |s: &mut PoseSpec| {
        s.set_pair(7, rest_dir(template, 7));
        s.set_pair(9, rest_dir(template, 9));
    };
    match kind {
        ScenarioKind::Circle => {
            // orbit the center at constant separation, facing each other
            let radius = 0.9;
            let angle = var.phase + 0.2 * PI * var.tempo * t;
            let w = ramp(t, 0.0, 1.0);
            let r = start + (radius - start) * w;
            let dir = Vector3::new(angle.cos(), angle.sin(), 0.0);
            let pel = [-dir * r + Vector3::new(0.0, 0.0, z), dir * r + Vector3::new(0.0, 0.0, z)];
            let h0 = angle;
            for s in spec.iter_mut() {
                arms_rest(s);
                walk_legs(s, TAU * 1.2 * t, 0.5);
            }
            return Frame { pelvis: pel, heading: [h0, h0 + PI], spec };
        }
        ScenarioKind::Hug | ScenarioKind::Approach => {
            let (walk_end, arms_start, arms_end) = match kind {
                ScenarioKind::Hug => (2.4, 0.7, 1.6),
                _ => (3.3, 2.6, 3.6),
            };
            // the shoulders stand proud of the torso capsules, so stop a little short of them
            let final_half = (touch + HUG_STANDOFF - var.squeeze) / 2.0;
            let w = ramp(t, 0.2, walk_end);
            half = start + (final_half - start) * w;
            let walking = (ramp(t, 0.0, 0.6) - ramp(t, walk_end - 0.6, walk_end)).max(0.0);
            let arm_w = ramp(t, arms_start, arms_end);
            // gentle rocking once embraced
            let rock = 0.06 * ramp(t, arms_end, arms_end + 0.5) * (TAU * 0.5 * (t - arms_end) + var.phase).sin();
            heading = [rock, PI + rock];
            // a small sideways offset keeps the heads clear of each other
            let lat = HUG_LATERAL * ramp(t, 0.2, walk_end);
            lateral = [lat, -lat];
            for (i, s) in spec.iter_mut().enumerate() {
                walk_legs(s, TAU * 0.9 * t, walking);
                // subject 0 reaches over the partner's shoulders, subject 1 around the waist
                for side in 0..2 {
                    let [upper, fore] = HUG_ARMS[i][side].map(|v| Vector3::from(v));
                    s.set(7 + side, blend(&rest_dir(template, 7 + side), &upper.normalize(), arm_w));
                    s.set(9 + side, blend(&rest_dir(template, 9 + side), &fore.normalize(), arm_w));
                }
            }
        }
        ScenarioKind::Push => {
            let w = ramp(t, 0.2, 2.2);
            let base = 0.32 + 0.04 * (TAU * 0.8 * (t - 2.2) + var.phase).sin() * ramp(t, 2.2, 2.8);
            half = start + (base - start) * w;
            let walking = (ramp(t, 0.0, 0.6) - ramp(t, 1.6, 2.2)).max(0.0);
            let arm_w = ramp(t, 1.4, 2.3);
            for (i, s) in spec.iter_mut().enumerate() {
                walk_legs(s, TAU * 0.9 * t, walking);
                if i == 0 {
                    // both palms on the partner's chest
                    s.set_pair(7, blend(&rest_dir(template, 7), &Vector3::new(0.1, 0.9, -0.25), arm_w));
                    s.set_pair(9, blend(&rest_dir(template, 9), &Vector3::new(0.1, 0.95, 0.1), arm_w));
                } else {
                    arms_rest(s);
                }
            }
        }
        ScenarioKind::Grapple => {
            let w = ramp(t, 0.2, 2.2);
            half = start + (0.3 - start) * w;
            let walking = (ramp(t, 0.0, 0.6) - ramp(t, 1.6, 2.2)).max(0.0);
            let arm_w = ramp(t, 1.5, 2.4);
            // lateral shuffles that reverse direction every half second
            let engaged = ramp(t, 2.2, 2.7);
            let shuffle = engaged * (0.08 * (TAU * 1.0 * t + var.phase).sin() + 0.04 * (TAU * 2.0 * t).sin());
            lateral = [shuffle, shuffle];
            let twist = engaged * 0.15 * (TAU * 0.7 * t + var.phase).sin();
            heading = [twist, PI + twist];
            for s in spec.iter_mut() {
                walk_legs(s, TAU * 0.9 * t, walking);
                // hands on the partner's shoulders and upper arms
                s.set_pair(7, blend(&rest_dir(template, 7), &Vector3::new(0.05, 0.9, 0.05), arm_w));
                s.set_pair(9, blend(&rest_dir(template, 9), &Vector3::new(0.25, 0.95, 0.1), arm_w));
            }
        }
    }
    let pelvis = [Vector3::new(-half, lateral[0], z), Vector3::new(half, lateral[1], z)];
    Frame { pelvis, heading, spec }
}

/// Builds a scenario of `kind` lasting `duration` seconds at `fps`.
pub fn make_scenario(kind: ScenarioKind, duration: f64, fps: f64, seed: u64) -> Result<Scenario> {
    make_scenario_with(kind, duration, fps, seed, &BodyTemplate::default(), 0.01)
}

pub fn make_scenario_with(
    kind: ScenarioKind,
    duration: f64,
    fps: f64,
    seed: u64,
    template: &BodyTemplate,
    contact_eps: f64,
) -> Result<Scenario> {
    if !(fps > 0.0 && duration > 0.0) {
        return Err(Error::InvalidScenario("duration and fps must be positive".into()));
    }
    let frames = (duration * fps).round() as usize;
    let var = Variation::draw(seed);
    let params = par::map_range(frames, |f| {
        let t = f as f64 / fps;
        let fr = author(kind, template, &var, t);
        (0..2)
            .map(|s| {
                let pelvis_at = var.world(fr.pelvis[s]);
                place(template, &var.shapes[s], fr.heading[s] + var.scene_angle, pelvis_at, &fr.spec[s])
            })
            .collect()
    });
    let mut scenario = Scenario { kind, duration, fps, seed, params, first_contact_frame: None };
    scenario.first_contact_frame = detect_first_contact(&scenario, template, contact_eps)?;
    Ok(scenario)
}

/// Smallest signed distance from either subject's surface samples to the other's body.
pub fn min_surface_distance(template: &BodyTemplate, a: &BodyParams, b: &BodyParams) -> Result<f64> {
    let pa = PosedBody::new(template, a)?.mesh(template);
    let pb = PosedBody::new(template, b)?.mesh(template);
    let da = pa.surface.vertices.iter().map(|v| pb.capsules.signed_distance(v)).fold(f64::INFINITY, f64::min);
    let db = pb.surface.vertices.iter().map(|v| pa.capsules.signed_distance(v)).fold(f64::INFINITY, f64::min);
    Ok(da.min(db))
}

/// First frame at which any surface sample of one subject comes within
/// `contact_eps` of the other's body.
pub fn detect_first_contact(scenario: &Scenario, template: &BodyTemplate, contact_eps: f64) -> Result<Option<usize>> {
    if scenario.subject_count() < 2 {
        return Ok(None);
    }
    let dists = par::map(&scenario.params, |f| min_surface_distance(template, &f[0], &f[1]));
    for (i, d) in dists.into_iter().enumerate() {
        if d? <= contact_eps {
            return Ok(Some(i));
        }
    }
    Ok(None)
}
