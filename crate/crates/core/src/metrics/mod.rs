//! Evaluation metrics: joint and vertex errors with their aligned variants,
//! detection scores, and interpenetration scores.
//!
//! Distances are reported in millimeters, volumes as percent IoU and areas
//! in square meters.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{pelvis, BodySurface, CapsuleSet, PosedMesh, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::geometry::procrustes_align;
use crate::par;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;
pub const MATCH_RADIUS_MM: f64 = 500.0;
pub const DEFAULT_VOXEL: f64 = 0.02;

/// Mean distance, in mm, under the three alignment conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedErrors {
    /// After translating the prediction's root onto the ground-truth root.
    pub rooted: f64,
    /// After the least-squares similarity transform.
    pub procrustes: f64,
    /// After root alignment and the least-squares uniform scale.
    pub normalized: f64,
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Errors over paired points, given each side's root.
pub fn aligned_errors(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    pred_root: Vector3<f64>,
    gt_root: Vector3<f64>,
) -> Result<AlignedErrors> {
    if pred.len() != gt.len() {
        return Err(Error::TemplateMismatch(format!("{} predicted vs {} reference points", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("no valid points".into()));
    }
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| x - pred_root).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|x| x - gt_root).collect();
    let rooted = mean_distance(&p, &g);
    let pp: f64 = p.iter().map(|x| x.norm_squared()).sum();
    let pg: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
    let s = if pp > 0.0 { pg / pp } else { 1.0 };
    let scaled: Vec<Vector3<f64>> = p.iter().map(|x| x * s).collect();
    let normalized = mean_distance(&scaled, &g);
    let procrustes = match procrustes_align(pred, gt, true) {
        Ok((tf, _)) => {
            let moved: Vec<Vector3<f64>> = pred.iter().map(|x| tf.apply(x)).collect();
            mean_distance(&moved, gt)
        }
        // too few or collinear points: fall back to centroid alignment
        Err(_) => {
            let n = pred.len() as f64;
            let shift = gt.iter().sum::<Vector3<f64>>() / n - pred.iter().sum::<Vector3<f64>>() / n;
            let moved: Vec<Vector3<f64>> = pred.iter().map(|x| x + shift).collect();
            mean_distance(&moved, gt)
        }
    };
    Ok(AlignedErrors { rooted: rooted * 1e3, procrustes: procrustes * 1e3, normalized: normalized * 1e3 })
}

/// MPJPE, PA-MPJPE and N-MPJPE in mm. The root is the hip midpoint; keypoints
/// flagged invalid in `valid` are excluded (the root always uses both hips).
pub fn joint_errors(
    pred: &[Vector3<f64>; NUM_KEYPOINTS],
    gt: &[Vector3<f64>; NUM_KEYPOINTS],
    valid: Option<&[bool; NUM_KEYPOINTS]>,
) -> Result<AlignedErrors> {
    let keep: Vec<usize> = (0..NUM_KEYPOINTS).filter(|&j| valid.map_or(true, |v| v[j])).collect();
    if keep.is_empty() {
        return Err(Error::UndefinedMetric("every keypoint is invalid".into()));
    }
    let p: Vec<Vector3<f64>> = keep.iter().map(|&j| pred[j]).collect();
    let g: Vec<Vector3<f64>> = keep.iter().map(|&j| gt[j]).collect();
    aligned_errors(&p, &g, pelvis(pred), pelvis(gt))
}

/// PVE, PA-PVE and N-PVE in mm over corresponding vertices. With `roots`
/// (prediction root, reference root) the rooted variant subtracts them;
/// without, positions are compared as they are.
pub fn vertex_errors(
    pred: &BodySurface,
    gt: &BodySurface,
    roots: Option<(Vector3<f64>, Vector3<f64>)>,
) -> Result<AlignedErrors> {
    if pred.len() != gt.len() {
        return Err(Error::TemplateMismatch(format!("{} predicted vs {} reference vertices", pred.len(), gt.len())));
    }
    let (pr, gr) = roots.unwrap_or((Vector3::zeros(), Vector3::zeros()));
    aligned_errors(&pred.vertices, &gt.vertices, pr, gr)
}

/// One detected (or ground-truth) person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonPose {
    pub keypoints: [Vector3<f64>; NUM_KEYPOINTS],
    pub valid: [bool; NUM_KEYPOINTS],
}

impl PersonPose {
    pub fn new(keypoints: [Vector3<f64>; NUM_KEYPOINTS]) -> Self {
        Self { keypoints, valid: [true; NUM_KEYPOINTS] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    /// Percent of matched keypoints closer than the threshold (strict).
    pub pck3d: f64,
    /// Mean PCK over thresholds 0, 5, ..., threshold mm, in percent.
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy root-distance matching of people within [`MATCH_RADIUS_MM`].
fn match_people(pred: &[PersonPose], gt: &[PersonPose]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (k, g) in gt.iter().enumerate() {
            let d = (pelvis(&p.keypoints) - pelvis(&g.keypoints)).norm() * 1e3;
            if d < MATCH_RADIUS_MM {
                pairs.push((d, i, k));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut out = Vec::new();
    for (_, i, k) in pairs {
        if !used_p[i] && !used_g[k] {
            used_p[i] = true;
            used_g[k] = true;
            out.push((i, k));
        }
    }
    out
}

/// 3D PCK, its AUC and person-level F1 over frame-aligned sequences.
pub fn detection_scores(
    pred: &[Vec<PersonPose>],
    gt: &[Vec<PersonPose>],
    pck_threshold_mm: f64,
) -> Result<DetectionScores> {
    if pred.len() != gt.len() {
        return Err(Error::Alignment(format!("{} predicted frames vs {} reference frames", pred.len(), gt.len())));
    }
    let mut errors = Vec::new();
    let (mut n_pred, mut n_gt, mut tp) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        n_pred += p.len();
        n_gt += g.len();
        for (i, k) in match_people(p, g) {
            tp += 1;
            for j in 0..NUM_KEYPOINTS {
                if p[i].valid[j] && g[k].valid[j] {
                    errors.push((p[i].keypoints[j] - g[k].keypoints[j]).norm() * 1e3);
                }
            }
        }
    }
    let pck_at = |thr: f64| {
        if errors.is_empty() {
            0.0
        } else {
            100.0 * errors.iter().filter(|e| **e < thr).count() as f64 / errors.len() as f64
        }
    };
    let steps = (pck_threshold_mm / AUC_STEP_MM).round() as usize;
    let auc = (0..=steps).map(|i| pck_at(i as f64 * AUC_STEP_MM)).sum::<f64>() / (steps + 1) as f64;
    let precision = if n_pred == 0 { if n_gt == 0 { 1.0 } else { 0.0 } } else { tp as f64 / n_pred as f64 };
    let recall = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(DetectionScores { pck3d: pck_at(pck_threshold_mm), auc, precision, recall, f1 })
}

/// Interpenetration of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionFrame {
    /// Deepest vertex penetration in either direction, mm.
    pub p2s: f64,
    /// Voxelized intersection over union, percent.
    pub iou: f64,
    /// Surface area of each body lying inside the other, summed, m^2.
    pub ioa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionScores {
    pub mp2s: f64,
    pub miou: f64,
    pub mioa: f64,
    pub frames: Vec<CollisionFrame>,
}

fn inside_area(surface: &BodySurface, other: &CapsuleSet) -> (f64, f64) {
    let mut depth: f64 = 0.0;
    let mut area = 0.0;
    for (q, a) in surface.vertices.iter().zip(&surface.vertex_area) {
        if let Some((d, _)) = other.deepest_penetration(q, |_| true) {
            depth = depth.max(d);
            area += a;
        }
    }
    (depth, area)
}

fn voxel_iou(a: &CapsuleSet, b: &CapsuleSet, voxel: f64) -> f64 {
    if !a.aabb_overlaps(b, 0.0) {
        return 0.0;
    }
    let (a0, a1) = a.aabb();
    let (b0, b1) = b.aabb();
    let lo = a0.inf(&b0);
    let hi = a1.sup(&b1);
    let dims: Vec<usize> = (0..3).map(|k| ((hi[k] - lo[k]) / voxel).ceil().max(1.0) as usize).collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = lo + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * voxel;
                let ia = a.deepest_penetration(&c, |_| true).is_some();
                let ib = b.deepest_penetration(&c, |_| true).is_some();
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        100.0 * inter as f64 / union as f64
    }
}

/// Scores one frame of two posed bodies.
pub fn collision_frame(a: &PosedMesh, b: &PosedMesh, voxel: f64) -> CollisionFrame {
    let (da, aa) = inside_area(&a.surface, &b.capsules);
    let (db, ab) = inside_area(&b.surface, &a.capsules);
    CollisionFrame { p2s: da.max(db) * 1e3, iou: voxel_iou(&a.capsules, &b.capsules, voxel), ioa: aa + ab }
}

/// mP2S (mm), mIoU (percent) and mIoA (m^2): maxima over frames.
pub fn collision_scores(a: &[PosedMesh], b: &[PosedMesh], voxel: f64) -> Result<CollisionScores> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{} vs {} frames", a.len(), b.len())));
    }
    if !(voxel > 0.0) {
        return Err(Error::InvalidParameter("voxel size must be positive".into()));
    }
    let frames = par::map_range(a.len(), |t| collision_frame(&a[t], &b[t], voxel));
    let max = |f: fn(&CollisionFrame) -> f64| frames.iter().map(f).fold(0.0, f64::max);
    Ok(CollisionScores { mp2s: max(|f| f.p2s), miou: max(|f| f.iou), mioa: max(|f| f.ioa), frames })
}

/// Per-frame values behind a report; errors are averaged over subjects.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTraces {
    pub mpjpe: Vec<f64>,
    pub pa_mpjpe: Vec<f64>,
    pub n_mpjpe: Vec<f64>,
    pub pve: Vec<f64>,
    pub pa_pve: Vec<f64>,
    pub n_pve: Vec<f64>,
    pub p2s: Vec<f64>,
    pub iou: Vec<f64>,
    pub ioa: Vec<f64>,
}

/// Joint and vertex errors of one subject, averaged over frames (mm).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub n_mpjpe: f64,
    pub pve: f64,
    pub pa_pve: f64,
    pub n_pve: f64,
}

/// Scores of a whole sequence: errors pooled over subjects and frames, the
/// detection and collision scores, the per-subject errors and per-frame traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub n_mpjpe: f64,
    pub pve: f64,
    pub pa_pve: f64,
    pub n_pve: f64,
    pub pck3d: f64,
    pub auc: f64,
    pub f1: f64,
    pub mp2s: f64,
    pub miou: f64,
    pub mioa: f64,
    pub subjects: Vec<SubjectMetrics>,
    pub traces: MetricTraces,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mpjpe_mm,pa_mpjpe_mm,n_mpjpe_mm,pve_mm,pa_pve_mm,n_pve_mm,pck3d_pct,auc_pct,f1,mp2s_mm,miou_pct,mioa_m2";

    pub fn csv_row(&self) -> String {
        [
            self.mpjpe,
            self.pa_mpjpe,
            self.n_mpjpe,
            self.pve,
            self.pa_pve,
            self.n_pve,
            self.pck3d,
            self.auc,
            self.f1,
            self.mp2s,
            self.miou,
            self.mioa,
        ]
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
