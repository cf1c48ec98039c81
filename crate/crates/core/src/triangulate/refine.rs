//! Whole-sequence keypoint refinement: data fidelity, second-difference
//! smoothness, constant bone lengths and left/right length symmetry,
//! minimized by gradient descent with a backtracking step.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Pose3DSequence, PoseFrame};
use crate::body::{bone_joints, mirror_bone_pairs, NUM_BONES, NUM_KEYPOINTS};
use crate::error::{Error, Result};

type Frame = [Vector3<f64>; NUM_KEYPOINTS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineWeights {
    pub data: f64,
    pub temporal: f64,
    pub bone: f64,
    pub symmetry: f64,
    pub iterations: usize,
}

impl Default for RefineWeights {
    fn default() -> Self {
        Self { data: 1.0, temporal: 10.0, bone: 100.0, symmetry: 100.0, iterations: 200 }
    }
}

impl RefineWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.data, self.temporal, self.bone, self.symmetry];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidParameter("refinement weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn bone_lengths(x: &[Frame]) -> Vec<[f64; NUM_BONES]> {
    let joints = bone_joints();
    x.iter().map(|f| std::array::from_fn(|b| (f[joints[b].1] - f[joints[b].0]).norm())).collect()
}

fn mean_lengths(lengths: &[[f64; NUM_BONES]]) -> [f64; NUM_BONES] {
    let n = lengths.len().max(1) as f64;
    std::array::from_fn(|b| lengths.iter().map(|l| l[b]).sum::<f64>() / n)
}

/// Value of the refinement objective for positions `x` against `observed`.
pub fn refine_objective(x: &[Frame], observed: &Pose3DSequence, w: &RefineWeights) -> f64 {
    let mut f = 0.0;
    for (xt, obs) in x.iter().zip(&observed.frames) {
        for j in 0..NUM_KEYPOINTS {
            if obs.valid[j] {
                f += w.data * (xt[j] - obs.keypoints[j]).norm_squared();
            }
        }
    }
    for t in 1..x.len().saturating_sub(1) {
        for j in 0..NUM_KEYPOINTS {
            f += w.temporal * (x[t + 1][j] - 2.0 * x[t][j] + x[t - 1][j]).norm_squared();
        }
    }
    let lengths = bone_lengths(x);
    let mean = mean_lengths(&lengths);
    for l in &lengths {
        for b in 0..NUM_BONES {
            f += w.bone * (l[b] - mean[b]).powi(2);
        }
        for (a, c) in mirror_bone_pairs() {
            f += w.symmetry * (l[a] - l[c]).powi(2);
        }
    }
    f
}

fn gradient(x: &[Frame], observed: &Pose3DSequence, w: &RefineWeights) -> Vec<Frame> {
    let t_len = x.len();
    let mut g = vec![[Vector3::zeros(); NUM_KEYPOINTS]; t_len];
    for (t, obs) in observed.frames.iter().enumerate() {
        for j in 0..NUM_KEYPOINTS {
            if obs.valid[j] {
                g[t][j] += 2.0 * w.data * (x[t][j] - obs.keypoints[j]);
            }
        }
    }
    for t in 1..t_len.saturating_sub(1) {
        for j in 0..NUM_KEYPOINTS {
            let r = 2.0 * w.temporal * (x[t + 1][j] - 2.0 * x[t][j] + x[t - 1][j]);
            g[t + 1][j] += r;
            g[t][j] -= 2.0 * r;
            g[t - 1][j] += r;
        }
    }
    let joints = bone_joints();
    let lengths = bone_lengths(x);
    let mean = mean_lengths(&lengths);
    let mirror = mirror_bone_pairs();
    for t in 0..t_len {
        // d f / d l_b at this frame; the mean's own dependence cancels
        // because the residuals around it sum to zero.
        let mut dl = [0.0; NUM_BONES];
        for b in 0..NUM_BONES {
            dl[b] += 2.0 * w.bone * (lengths[t][b] - mean[b]);
        }
        for &(a, c) in &mirror {
            let r = 2.0 * w.symmetry * (lengths[t][a] - lengths[t][c]);
            dl[a] += r;
            dl[c] -= r;
        }
        for b in 0..NUM_BONES {
            let (p, q) = joints[b];
            let d = x[t][q] - x[t][p];
            let n = d.norm();
            if n > 1e-12 {
                let u = d * (dl[b] / n);
                g[t][q] += u;
                g[t][p] -= u;
            }
        }
    }
    g
}

/// Fills invalid keypoints by linear interpolation between the nearest
/// valid frames (or the nearest valid frame at the ends).
fn initial_guess(seq: &Pose3DSequence) -> Vec<Frame> {
    let mut x: Vec<Frame> = seq.keypoints();
    for j in 0..NUM_KEYPOINTS {
        let valid: Vec<usize> = (0..seq.len()).filter(|&t| seq.frames[t].valid[j]).collect();
        if valid.is_empty() {
            for f in x.iter_mut() {
                if !f[j].iter().all(|v| v.is_finite()) {
                    f[j] = Vector3::zeros();
                }
            }
            continue;
        }
        for t in 0..seq.len() {
            if seq.frames[t].valid[j] {
                continue;
            }
            let next = valid.partition_point(|&v| v < t);
            x[t][j] = match (next.checked_sub(1).map(|i| valid[i]), valid.get(next)) {
                (Some(a), Some(&b)) => {
                    let s = (t - a) as f64 / (b - a) as f64;
                    seq.frames[a].keypoints[j] * (1.0 - s) + seq.frames[b].keypoints[j] * s
                }
                (Some(a), None) => seq.frames[a].keypoints[j],
                (None, Some(&b)) => seq.frames[b].keypoints[j],
                (None, None) => unreachable!(),
            };
        }
    }
    x
}

/// Jointly smooths a keypoint sequence; invalid keypoints are in-filled by
/// the optimized values. Validity flags and inlier counts are carried over.
pub fn refine_sequence(seq: &Pose3DSequence, weights: &RefineWeights) -> Result<Pose3DSequence> {
    weights.validate()?;
    for (t, f) in seq.frames.iter().enumerate() {
        for j in 0..NUM_KEYPOINTS {
            if f.valid[j] && !f.keypoints[j].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite valid keypoint {j} at frame {t}")));
            }
        }
    }
    if seq.is_empty() {
        return Ok(seq.clone());
    }
    let mut x = initial_guess(seq);
    let mut f = refine_objective(&x, seq, weights);
    let mut step = 1e-3;
    for _ in 0..weights.iterations {
        let g = gradient(&x, seq, weights);
        let gnorm2: f64 = g.iter().flat_map(|f| f.iter()).map(|v| v.norm_squared()).sum();
        if gnorm2 < 1e-24 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<Frame> = x
                .iter()
                .zip(&g)
                .map(|(xt, gt)| std::array::from_fn(|j| xt[j] - gt[j] * step))
                .collect();
            let ft = refine_objective(&trial, seq, weights);
            // sufficient decrease
            if ft <= f - 1e-4 * step * gnorm2 {
                x = trial;
                f = ft;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !f.is_finite() {
        return Err(Error::Divergence { stage: "sequence refinement".into(), frame: None });
    }
    Ok(Pose3DSequence {
        frames: x
            .into_iter()
            .zip(&seq.frames)
            .map(|(k, src)| PoseFrame { keypoints: k, valid: src.valid, inliers: src.inliers })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from(frames: Vec<Frame>) -> Pose3DSequence {
        Pose3DSequence { frames: frames.into_iter().map(PoseFrame::from_keypoints).collect() }
    }

    fn wobble(t_len: usize) -> Vec<Frame> {
        let rest = crate::body::standard_rest_positions();
        (0..t_len)
            .map(|t| {
                let s = t as f64 * 0.05;
                let off = Vector3::new(s.sin() * 0.3, s * 0.1, 0.0);
                rest.map(|p| p + off)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut frames = wobble(6);
        // perturb so every term is active
        for (t, f) in frames.iter_mut().enumerate() {
            for (j, p) in f.iter_mut().enumerate() {
                *p += Vector3::new(0.01 * ((t * 7 + j) % 5) as f64, -0.004 * (j % 3) as f64, 0.002 * t as f64);
            }
        }
        let mut seq = seq_from(wobble(6));
        seq.frames[2].valid[4] = false;
        let w = RefineWeights::default();
        let g = gradient(&frames, &seq, &w);
        let h = 1e-6;
        for &(t, j, k) in &[(0, 0, 0), (2, 4, 1), (3, 9, 2), (5, 16, 0), (1, 11, 2)] {
            let mut xp = frames.clone();
            xp[t][j][k] += h;
            let mut xm = frames.clone();
            xm[t][j][k] -= h;
            let fd = (refine_objective(&xp, &seq, &w) - refine_objective(&xm, &seq, &w)) / (2.0 * h);
            assert!((fd - g[t][j][k]).abs() <= 1e-5 * fd.abs().max(1.0), "{t} {j} {k}: {fd} vs {}", g[t][j][k]);
        }
    }

    #[test]
    fn clean_sequence_is_a_fixed_point() {
        let seq = seq_from(wobble(30));
        let out = refine_sequence(&seq, &RefineWeights::default()).unwrap();
        let f_in = refine_objective(&seq.keypoints(), &seq, &RefineWeights::default());
        let f_out = refine_objective(&out.keypoints(), &seq, &RefineWeights::default());
        assert!(f_out <= f_in);
        for (a, b) in out.frames.iter().zip(&seq.frames) {
            for j in 0..NUM_KEYPOINTS {
                assert!((a.keypoints[j] - b.keypoints[j]).norm() < 2e-3);
            }
        }
    }

    #[test]
    fn interpolation_fills_gaps() {
        let mut seq = seq_from(wobble(5));
        seq.frames[2].valid[7] = false;
        seq.frames[2].keypoints[7] = Vector3::repeat(f64::NAN);
        let x = initial_guess(&seq);
        let expect = (seq.frames[1].keypoints[7] + seq.frames[3].keypoints[7]) * 0.5;
        assert!((x[2][7] - expect).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_valid_input() {
        let mut seq = seq_from(wobble(3));
        seq.frames[1].keypoints[0].x = f64::INFINITY;
        assert!(refine_sequence(&seq, &RefineWeights::default()).is_err());
    }
}
