//! Fitting body parameters to triangulated keypoint sequences.
//!
//! The objective has seven terms, weighted by [`MeshFitWeights`]:
//!
//! 1. mean distance between targets and model keypoints over valid entries,
//! 2. per-frame magnitude of the joint rotations (deviation from identity),
//! 3. bone-length variance across frames,
//! 4. left/right bone-length mismatch,
//! 5. squared second differences of keypoints over time,
//! 6. negative log-likelihood of the shape under a Gaussian mixture,
//! 7. robustified interpenetration between subjects.
//!
//! Sequence terms are averaged over frames and summed over subjects, so the
//! weights do not depend on clip length.

mod collision;
mod optimize;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{
    bone_joints, mirror_bone_pairs, rotation, BodyGrad, BodyParams, BodyTemplate, PosedBody, NUM_BONES, NUM_KEYPOINTS,
    NUM_SHAPE,
};
use crate::error::{Error, Result};
use crate::par;
use crate::triangulate::Pose3DSequence;

pub use collision::{collision_loss, extract_contacts, max_penetration, max_penetration_sequence};
pub use optimize::{fit_sequence, initialize, initialize_shape, FitResult, FitStages, StageTrace};

pub const NUM_TERMS: usize = 7;

pub type ShapeVector = SVector<f64, NUM_SHAPE>;
pub type ShapeMatrix = SMatrix<f64, NUM_SHAPE, NUM_SHAPE>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshFitWeights {
    /// Keypoint data.
    pub w1: f64,
    /// Pose magnitude.
    pub w2: f64,
    /// Constant limb length.
    pub w3: f64,
    /// Left/right symmetry.
    pub w4: f64,
    /// Temporal smoothness.
    pub w5: f64,
    /// Shape prior.
    pub w6: f64,
    /// Interpenetration.
    pub w7: f64,
    /// Geman-McClure scale in meters.
    pub robustifier_scale: f64,
}

impl Default for MeshFitWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1e-3, w3: 10.0, w4: 10.0, w5: 1.0, w6: 1e-2, w7: 1.0, robustifier_scale: 0.15 }
    }
}

impl MeshFitWeights {
    pub fn as_array(&self) -> [f64; NUM_TERMS] {
        [self.w1, self.w2, self.w3, self.w4, self.w5, self.w6, self.w7]
    }

    /// Only term `i` (0-based) at unit weight.
    pub fn single(i: usize) -> Self {
        let mut w = [0.0; NUM_TERMS];
        w[i] = 1.0;
        Self::from_array(w, 0.15)
    }

    pub fn from_array(w: [f64; NUM_TERMS], robustifier_scale: f64) -> Self {
        Self { w1: w[0], w2: w[1], w3: w[2], w4: w[3], w5: w[4], w6: w[5], w7: w[6], robustifier_scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("mesh-fit weights must be finite and >= 0".into()));
        }
        if !(self.robustifier_scale > 0.0) || !self.robustifier_scale.is_finite() {
            return Err(Error::InvalidParameter("robustifier scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Gaussian mixture over shape coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePrior {
    pub weights: Vec<f64>,
    pub means: Vec<ShapeVector>,
    pub covariances: Vec<ShapeMatrix>,
}

impl Default for ShapePrior {
    /// Two zero-mean components, unit and doubled standard deviation.
    fn default() -> Self {
        Self {
            weights: vec![0.6, 0.4],
            means: vec![ShapeVector::zeros(); 2],
            covariances: vec![ShapeMatrix::identity(), ShapeMatrix::identity() * 4.0],
        }
    }
}

struct Component {
    log_norm: f64,
    mean: ShapeVector,
    inv: ShapeMatrix,
}

impl ShapePrior {
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvalidParameter("shape prior needs matching, non-empty component lists".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("mixture weights must be positive and sum to 1".into()));
        }
        for c in &self.covariances {
            if (c - c.transpose()).abs().max() > 1e-12 * c.abs().max() || c.cholesky().is_none() {
                return Err(Error::InvalidParameter("mixture covariances must be symmetric positive definite".into()));
            }
        }
        Ok(())
    }

    fn components(&self) -> Vec<Component> {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, m), c)| {
                let ch = c.cholesky().expect("validated covariance");
                let log_det: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Component {
                    log_norm: w.ln() - NUM_SHAPE as f64 * half_log_2pi - 0.5 * log_det,
                    mean: *m,
                    inv: ch.inverse(),
                }
            })
            .collect()
    }

    /// `-log sum_k w_k N(shape | mean_k, cov_k)` and its gradient.
    pub fn nll_with_grad(&self, shape: &[f64; NUM_SHAPE]) -> (f64, [f64; NUM_SHAPE]) {
        let x = ShapeVector::from(*shape);
        let comps = self.components();
        let logs: Vec<(f64, ShapeVector)> = comps
            .iter()
            .map(|c| {
                let d = x - c.mean;
                let id = c.inv * d;
                (c.log_norm - 0.5 * d.dot(&id), id)
            })
            .collect();
        let top = logs.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l.0 - top).exp()).sum();
        let nll = -(top + sum.ln());
        let mut g = ShapeVector::zeros();
        for (l, id) in &logs {
            g += id * ((l - top).exp() / sum);
        }
        (nll, g.into())
    }

    pub fn nll(&self, shape: &[f64; NUM_SHAPE]) -> f64 {
        self.nll_with_grad(shape).0
    }

    /// No shape has a lower negative log-likelihood than this.
    pub fn nll_lower_bound(&self) -> f64 {
        let comps = self.components();
        let top = comps.iter().map(|c| c.log_norm).fold(f64::NEG_INFINITY, f64::max);
        -(top + comps.iter().map(|c| (c.log_norm - top).exp()).sum::<f64>().ln())
    }
}

/// Per-term values and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: [f64; NUM_TERMS],
    pub total: f64,
}

fn check_alignment(params: &[Vec<BodyParams>], targets: &[Pose3DSequence]) -> Result<usize> {
    if params.is_empty() {
        return Err(Error::Alignment("no subjects".into()));
    }
    if params.len() != targets.len() {
        return Err(Error::Alignment(format!("{} parameter tracks for {} target tracks", params.len(), targets.len())));
    }
    let frames = params[0].len();
    for (s, (p, t)) in params.iter().zip(targets).enumerate() {
        if p.len() != frames || t.len() != frames {
            return Err(Error::Alignment(format!(
                "subject {s}: {} parameter frames, {} target frames, expected {frames}",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(frames)
}

const IDENTITY_COLUMNS: [Vector3<f64>; 2] = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];

/// Objective value and, optionally, its gradient `[subject][frame]`.
pub(crate) fn objective(
    template: &BodyTemplate,
    params: &[Vec<BodyParams>],
    targets: &[Pose3DSequence],
    weights: &MeshFitWeights,
    prior: &ShapePrior,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<BodyGrad>>>)> {
    let frames = check_alignment(params, targets)?;
    let n = params.len();
    let w = weights.as_array();
    let joints = bone_joints();
    let mirror = mirror_bone_pairs();

    let posed: Vec<Vec<PosedBody>> = params
        .iter()
        .map(|track| {
            par::map(track, |p| PosedBody::new(template, p)).into_iter().collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut terms = [0.0; NUM_TERMS];
    // weighted gradient on keypoints, and direct gradients on parameters
    let mut g_kp = vec![vec![[Vector3::zeros(); NUM_KEYPOINTS]; frames]; n];
    let mut g_direct = vec![vec![BodyGrad::zero(); frames]; n];
    let tf = frames.max(1) as f64;

    for s in 0..n {
        let kp: Vec<&[Vector3<f64>; NUM_KEYPOINTS]> = posed[s].iter().map(|p| &p.joints).collect();

        // 1: keypoint data
        let count = targets[s].frames.iter().map(|f| f.valid.iter().filter(|v| **v).count()).sum::<usize>();
        if count > 0 {
            let mut sum = 0.0;
            for (t, f) in targets[s].frames.iter().enumerate() {
                for j in 0..NUM_KEYPOINTS {
                    if !f.valid[j] {
                        continue;
                    }
                    let r = kp[t][j] - f.keypoints[j];
                    let d = r.norm();
                    sum += d;
                    if with_grad && d > 0.0 {
                        g_kp[s][t][j] += r * (w[0] / (d * count as f64));
                    }
                }
            }
            terms[0] += sum / count as f64;
        }

        // 2: rotation magnitude
        let mut sum2 = 0.0;
        for t in 0..frames {
            let p = &posed[s][t];
            let mut sq = 0.0;
            for b in 0..NUM_BONES {
                let r = &p.local[b + 1];
                for (c, e) in IDENTITY_COLUMNS.iter().enumerate() {
                    sq += (r.column(c) - e).norm_squared();
                }
            }
            let norm = sq.sqrt();
            sum2 += norm;
            if with_grad && norm > 0.0 && w[1] != 0.0 {
                for b in 0..NUM_BONES {
                    let r = &p.local[b + 1];
                    let mut gr = Matrix3::zeros();
                    for (c, e) in IDENTITY_COLUMNS.iter().enumerate() {
                        gr.set_column(c, &((r.column(c) - e) * (w[1] / (norm * tf))));
                    }
                    let g6 = rotation::backprop(&params[s][t].pose[b], &gr);
                    for i in 0..6 {
                        g_direct[s][t].pose[b][i] += g6[i];
                    }
                }
            }
        }
        terms[1] += sum2 / tf;

        // 3 and 4: bone lengths
        let mut g_len = vec![[0.0; NUM_BONES]; frames];
        let lengths: Vec<[f64; NUM_BONES]> = kp
            .iter()
            .map(|k| std::array::from_fn(|b| (k[joints[b].1] - k[joints[b].0]).norm()))
            .collect();
        for b in 0..NUM_BONES {
            let mean = lengths.iter().map(|l| l[b]).sum::<f64>() / tf;
            for (t, l) in lengths.iter().enumerate() {
                let dev = l[b] - mean;
                terms[2] += dev * dev / tf;
                g_len[t][b] += w[2] * 2.0 * dev / tf;
            }
        }
        for (t, l) in lengths.iter().enumerate() {
            for &(a, c) in &mirror {
                let d = l[a] - l[c];
                terms[3] += d * d / tf;
                g_len[t][a] += w[3] * 2.0 * d / tf;
                g_len[t][c] -= w[3] * 2.0 * d / tf;
            }
        }
        if with_grad {
            for t in 0..frames {
                for b in 0..NUM_BONES {
                    let (pa, pc) = joints[b];
                    let e = kp[t][pc] - kp[t][pa];
                    let len = lengths[t][b];
                    if len > 0.0 {
                        let u = e * (g_len[t][b] / len);
                        g_kp[s][t][pc] += u;
                        g_kp[s][t][pa] -= u;
                    }
                }
            }
        }

        // 5: temporal smoothness
        if frames >= 3 {
            let norm = ((frames - 2) * NUM_KEYPOINTS) as f64;
            for t in 1..frames - 1 {
                for j in 0..NUM_KEYPOINTS {
                    let a = kp[t + 1][j] - kp[t][j] * 2.0 + kp[t - 1][j];
                    terms[4] += a.norm_squared() / norm;
                    if with_grad {
                        let g = a * (2.0 * w[4] / norm);
                        g_kp[s][t + 1][j] += g;
                        g_kp[s][t][j] -= g * 2.0;
                        g_kp[s][t - 1][j] += g;
                    }
                }
            }
        }

        // 6: shape prior
        for t in 0..frames {
            let (nll, g) = prior.nll_with_grad(&params[s][t].shape);
            terms[5] += nll / tf;
            for i in 0..NUM_SHAPE {
                g_direct[s][t].shape[i] += w[5] * g[i] / tf;
            }
        }
    }

    // 7: collision, frame-parallel
    let compute_collision = w[6] != 0.0 || !with_grad;
    let per_frame: Vec<(f64, Option<Vec<collision::PosedGrad>>)> = if compute_collision {
        par::map_range(frames, |t| {
            let bodies: Vec<&PosedBody> = posed.iter().map(|p| &p[t]).collect();
            collision::frame_collision(template, &bodies, weights.robustifier_scale, with_grad && w[6] != 0.0)
        })
    } else {
        Vec::new()
    };
    for (t, (v, _)) in per_frame.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Divergence { stage: "collision".into(), frame: Some(t) });
        }
        terms[6] += v / tf;
    }

    let total: f64 = terms.iter().zip(&w).map(|(a, b)| a * b).sum();
    let loss = LossBreakdown { terms, total };
    if !with_grad {
        return Ok((loss, None));
    }

    let grads: Vec<Vec<BodyGrad>> = (0..n)
        .map(|s| {
            par::map_range(frames, |t| {
                let mut gj = g_kp[s][t];
                let mut groot = Matrix3::zeros();
                let mut gradii = [0.0; NUM_BONES];
                if let Some((_, Some(g))) = per_frame.get(t) {
                    let scale = w[6] / tf;
                    for j in 0..NUM_KEYPOINTS {
                        gj[j] += g[s].joints[j] * scale;
                    }
                    groot += g[s].root * scale;
                    for b in 0..NUM_BONES {
                        gradii[b] += g[s].radii[b] * scale;
                    }
                }
                let mut out = posed[s][t].backprop(template, &gj, &groot, &gradii);
                out.add_scaled(&g_direct[s][t], 1.0);
                out
            })
        })
        .collect();
    Ok((loss, Some(grads)))
}

/// Per-term breakdown and weighted total of the fitting objective.
pub fn evaluate_losses(
    template: &BodyTemplate,
    params: &[Vec<BodyParams>],
    targets: &[Pose3DSequence],
    weights: &MeshFitWeights,
    prior: &ShapePrior,
) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(objective(template, params, targets, weights, prior, false)?.0)
}

/// Objective value with its gradient per subject and frame.
pub fn evaluate_with_gradient(
    template: &BodyTemplate,
    params: &[Vec<BodyParams>],
    targets: &[Pose3DSequence],
    weights: &MeshFitWeights,
    prior: &ShapePrior,
) -> Result<(LossBreakdown, Vec<Vec<BodyGrad>>)> {
    weights.validate()?;
    let (l, g) = objective(template, params, targets, weights, prior, true)?;
    Ok((l, g.expect("gradient requested")))
}
