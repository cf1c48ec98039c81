//! Staged first-order optimization of the fitting objective.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{max_penetration_sequence, objective, LossBreakdown, MeshFitWeights, ShapePrior, ShapeMatrix, ShapeVector};
use crate::body::{bone_joints, rotation, BodyGrad, BodyParams, BodyTemplate, NUM_BONES, NUM_KEYPOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::geometry::rotation_between;
use crate::par;
use crate::triangulate::Pose3DSequence;

const PER_FRAME: usize = NUM_BONES * 6 + 6 + 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitStages {
    pub steps: usize,
    /// Step size for rotation and shape coordinates; translations use half of it (meters).
    pub learning_rate: f64,
    /// Step size at the end of a stage relative to the start.
    pub final_lr_fraction: f64,
    /// Re-run the joint stage with a raised collision weight when the
    /// largest penetration exceeds `escalation_threshold` meters.
    pub escalate: bool,
    pub escalation_threshold: f64,
    pub escalation_factor: f64,
    pub contact_eps: f64,
}

impl Default for FitStages {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            final_lr_fraction: 0.01,
            escalate: true,
            escalation_threshold: 0.025,
            escalation_factor: 10.0,
            contact_eps: 0.01,
        }
    }
}

impl FitStages {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.final_lr_fraction > 0.0
            && self.final_lr_fraction <= 1.0
            && self.escalation_threshold >= 0.0
            && self.escalation_factor >= 1.0
            && self.contact_eps > 0.0;
        if !ok {
            return Err(Error::InvalidParameter("invalid fitting schedule".into()));
        }
        Ok(())
    }
}

/// Loss after initialization and after every accepted step of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub losses: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// `params[subject][frame]`; shape is shared across a subject's frames.
    pub params: Vec<Vec<BodyParams>>,
    pub traces: Vec<StageTrace>,
    /// `contacts[subject][frame]`: sorted indices of vertices in contact.
    pub contacts: Vec<Vec<Vec<u32>>>,
}

/// Shape coefficients whose bone lengths best match the median observed
/// lengths (ridge-regularized least squares).
pub fn initialize_shape(template: &BodyTemplate, seq: &Pose3DSequence) -> [f64; NUM_SHAPE] {
    let joints = bone_joints();
    let mut a = ShapeMatrix::zeros();
    let mut rhs = ShapeVector::zeros();
    for b in 0..NUM_BONES {
        let (pa, pc) = joints[b];
        let mut lens: Vec<f64> = seq
            .frames
            .iter()
            .filter(|f| f.valid[pa] && f.valid[pc])
            .map(|f| (f.keypoints[pc] - f.keypoints[pa]).norm())
            .filter(|l| l.is_finite())
            .collect();
        if lens.is_empty() {
            continue;
        }
        lens.sort_by(f64::total_cmp);
        let m = lens.len();
        let median = if m % 2 == 1 { lens[m / 2] } else { 0.5 * (lens[m / 2 - 1] + lens[m / 2]) };
        let row = ShapeVector::from(template.length_basis[b]);
        a += row * row.transpose();
        rhs += row * (median - template.rest_length(b));
    }
    a += ShapeMatrix::identity() * 1e-6;
    let beta = a.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(ShapeVector::zeros);
    // keep within the template's supported range
    std::array::from_fn(|k| beta[k].clamp(-3.0, 3.0))
}

/// Heading frame from the shoulder and hip lines: x to the subject's right, z up.
fn heading_frame(k: &[Vector3<f64>; NUM_KEYPOINTS]) -> Option<Matrix3<f64>> {
    let across = (k[6] - k[5]) + (k[12] - k[11]);
    let x = Vector3::new(across.x, across.y, 0.0);
    if !(x.norm() > 1e-6) {
        return None;
    }
    let x = x.normalize();
    let z = Vector3::z();
    Some(Matrix3::from_columns(&[x, z.cross(&x), z]))
}

/// Analytic initialization: shape from bone lengths, orientation from the
/// torso heading, and each joint as the minimal swing that points its bone
/// at the observed child keypoint.
pub fn initialize(template: &BodyTemplate, seq: &Pose3DSequence) -> Result<Vec<BodyParams>> {
    let shape = initialize_shape(template, seq);
    let mut out = Vec::with_capacity(seq.len());
    let mut last_root = Matrix3::identity();
    for f in &seq.frames {
        let k = &f.keypoints;
        if !k.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("initialization needs finite keypoints".into()));
        }
        let root = heading_frame(k).unwrap_or(last_root);
        last_root = root;
        let mut frames = [Matrix3::identity(); NUM_KEYPOINTS];
        frames[0] = root;
        let mut p = BodyParams::rest();
        p.shape = shape;
        p.global_orient = rotation::encode(&root);
        for j in 1..NUM_KEYPOINTS {
            let parent = template.parents[j].unwrap();
            let natural = frames[parent] * template.rest_direction(j);
            let e = k[j] - k[parent];
            frames[j] = if e.norm() > 1e-9 {
                rotation_between(&natural, &e.normalize()) * frames[parent]
            } else {
                frames[parent]
            };
            p.pose[j - 1] = rotation::encode(&(frames[parent].transpose() * frames[j]));
        }
        let t = k[0] - root * template.rest_root;
        p.global_transl = [t.x, t.y, t.z];
        out.push(p);
    }
    Ok(out)
}

fn pack(params: &[Vec<BodyParams>]) -> Vec<f64> {
    let mut x = Vec::new();
    for track in params {
        x.extend_from_slice(&track[0].shape);
        for p in track {
            for r in &p.pose {
                x.extend_from_slice(r);
            }
            x.extend_from_slice(&p.global_orient);
            x.extend_from_slice(&p.global_transl);
        }
    }
    x
}

fn unpack(x: &[f64], params: &mut [Vec<BodyParams>]) {
    let mut i = 0;
    for track in params.iter_mut() {
        let mut shape = [0.0; NUM_SHAPE];
        shape.copy_from_slice(&x[i..i + NUM_SHAPE]);
        i += NUM_SHAPE;
        for p in track.iter_mut() {
            p.shape = shape;
            for r in p.pose.iter_mut() {
                r.copy_from_slice(&x[i..i + 6]);
                i += 6;
            }
            p.global_orient.copy_from_slice(&x[i..i + 6]);
            i += 6;
            p.global_transl.copy_from_slice(&x[i..i + 3]);
            i += 3;
        }
    }
}

fn pack_grad(grads: &[Vec<BodyGrad>]) -> Vec<f64> {
    let mut g = Vec::new();
    for track in grads {
        let mut shape = [0.0; NUM_SHAPE];
        for gt in track {
            for k in 0..NUM_SHAPE {
                shape[k] += gt.shape[k];
            }
        }
        g.extend_from_slice(&shape);
        for gt in track {
            for r in &gt.pose {
                g.extend_from_slice(r);
            }
            g.extend_from_slice(&gt.orient);
            g.extend_from_slice(gt.transl.as_slice());
        }
    }
    g
}

/// Relative step size of each packed coordinate.
fn step_scales(subjects: usize, frames: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(subjects * (NUM_SHAPE + frames * PER_FRAME));
    for _ in 0..subjects {
        s.extend(std::iter::repeat(1.0).take(NUM_SHAPE));
        for _ in 0..frames {
            s.extend(std::iter::repeat(1.0).take(NUM_BONES * 6 + 6));
            s.extend(std::iter::repeat(0.5).take(3));
        }
    }
    s
}

/// Re-encodes every 6D block from its decoded rotation; the objective only
/// sees decoded rotations, so this keeps the coordinates well scaled
/// without changing the loss.
fn normalize_rotations(params: &mut [Vec<BodyParams>]) {
    for track in params.iter_mut() {
        for p in track.iter_mut() {
            for r in p.pose.iter_mut().chain(std::iter::once(&mut p.global_orient)) {
                if let Ok(m) = rotation::decode(r) {
                    *r = rotation::encode(&m);
                }
            }
        }
    }
}

/// Halvings tried per step before the step is skipped.
const MAX_HALVINGS: usize = 30;

/// Adam directions with backtracking: a step is accepted only if the
/// objective does not increase, otherwise the step size is halved. The data
/// term is an unsquared distance, so near a good fit only short steps
/// succeed; a step that finds no decrease is skipped, not the whole stage,
/// since the moment estimates keep turning towards descent.
fn run_stage(
    name: &str,
    template: &BodyTemplate,
    params: &mut Vec<Vec<BodyParams>>,
    targets: &[Pose3DSequence],
    weights: &MeshFitWeights,
    prior: &ShapePrior,
    stages: &FitStages,
) -> Result<StageTrace> {
    let diverged = |frame| Error::Divergence { stage: name.to_string(), frame };
    let (mut loss, _) = objective(template, params, targets, weights, prior, false)?;
    if !loss.total.is_finite() {
        return Err(diverged(None));
    }
    let frames = params[0].len();
    let mut trace = StageTrace { stage: name.to_string(), losses: vec![loss] };
    let mut x = pack(params);
    let scales = step_scales(params.len(), frames);
    let (b1, b2, eps) = (0.9, 0.999, 1e-12);
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut backoff = 1.0f64;
    let mut trial_params = params.clone();
    for it in 0..stages.steps {
        let (_, grads) = objective(template, params, targets, weights, prior, true)?;
        let g = pack_grad(&grads.expect("gradient requested"));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(diverged(None));
        }
        let k = (it + 1) as i32;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        }
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        let progress = if stages.steps > 1 { it as f64 / (stages.steps - 1) as f64 } else { 0.0 };
        let lr = stages.learning_rate * stages.final_lr_fraction.powf(progress);
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let step = lr * backoff;
            let trial: Vec<f64> = (0..x.len())
                .map(|i| x[i] - step * scales[i] * (m[i] / c1) / ((v[i] / c2).sqrt() + eps))
                .collect();
            unpack(&trial, &mut trial_params);
            normalize_rotations(&mut trial_params);
            match objective(template, &trial_params, targets, weights, prior, false) {
                Ok((l, _)) if l.total.is_finite() && l.total <= loss.total => {
                    loss = l;
                    std::mem::swap(params, &mut trial_params);
                    x = pack(params);
                    backoff = (backoff * 1.5).min(1.0);
                    accepted = true;
                    break;
                }
                _ => backoff *= 0.5,
            }
        }
        if accepted {
            trace.losses.push(loss);
        }
    }
    Ok(trace)
}

/// Fits every subject's parameter track to its keypoint targets.
///
/// Stage A fits each subject alone without the collision term; stage B
/// refines all subjects jointly with the full objective; stage C repeats B
/// with a raised collision weight if penetration is still above threshold.
pub fn fit_sequence(
    template: &BodyTemplate,
    targets: &[Pose3DSequence],
    init: &[Vec<BodyParams>],
    weights: &MeshFitWeights,
    prior: &ShapePrior,
    stages: &FitStages,
) -> Result<FitResult> {
    weights.validate()?;
    prior.validate()?;
    stages.validate()?;
    super::check_alignment(init, targets)?;
    if init[0].is_empty() {
        return Err(Error::InvalidInput("nothing to fit: zero frames".into()));
    }
    // shape is shared: start every frame from the first frame's coefficients
    let mut params: Vec<Vec<BodyParams>> = init
        .iter()
        .map(|track| {
            let shape = track[0].shape;
            track.iter().map(|p| BodyParams { shape, ..*p }).collect()
        })
        .collect();
    for track in &params {
        for p in track {
            p.validate()?;
        }
    }
    normalize_rotations(&mut params);

    let mut traces = Vec::new();
    let independent = MeshFitWeights { w7: 0.0, ..*weights };
    let stage_a = par::map_range(params.len(), |s| {
        let mut one = vec![params[s].clone()];
        let trace = run_stage(&format!("A{s}"), template, &mut one, &targets[s..s + 1], &independent, prior, stages)?;
        Ok::<_, Error>((one.pop().unwrap(), trace))
    });
    for (s, r) in stage_a.into_iter().enumerate() {
        let (track, trace) = r?;
        params[s] = track;
        traces.push(trace);
    }

    traces.push(run_stage("B", template, &mut params, targets, weights, prior, stages)?);

    if stages.escalate && weights.w7 > 0.0 && max_penetration_sequence(template, &params)? > stages.escalation_threshold
    {
        let raised = MeshFitWeights { w7: weights.w7 * stages.escalation_factor, ..*weights };
        traces.push(run_stage("C", template, &mut params, targets, &raised, prior, stages)?);
    }

    let contacts = super::extract_contacts(template, &params, stages.contact_eps)?;
    Ok(FitResult { params, traces, contacts })
}
