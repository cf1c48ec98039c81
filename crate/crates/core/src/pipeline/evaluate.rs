//! Scoring pipeline outputs against the generating motion.

use nalgebra::Vector3;

use super::{PipelineConfig, PipelineOutput, Scene};
use crate::body::{forward_kinematics, pelvis, surface_vertices, BodyParams, BodyTemplate, PosedBody, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::metrics::{
    collision_scores, detection_scores, joint_errors, vertex_errors, AlignedErrors, MetricTraces, MetricsReport,
    PersonPose, SubjectMetrics,
};
use crate::par;
use crate::simulate::Scenario;
use crate::triangulate::Pose3DSequence;

type Keypoints = [Vector3<f64>; NUM_KEYPOINTS];

/// `[frame][subject]` keypoints of the ground truth.
pub fn ground_truth_keypoints(scene: &Scene, template: &BodyTemplate) -> Result<Vec<Vec<Keypoints>>> {
    scene.ground_truth.as_ref().ok_or(Error::NoGroundTruth)?.keypoints(template)
}

/// For each tracked subject, the true subject it follows: the pairing with
/// the smallest summed keypoint distance over all valid keypoints.
pub fn match_subjects(poses: &[Pose3DSequence], truth: &[Vec<Keypoints>]) -> Result<Vec<usize>> {
    let n = poses.len();
    if truth.first().map_or(0, |f| f.len()) != n {
        return Err(Error::Alignment(format!("{n} tracked subjects vs {} true subjects", truth.first().map_or(0, |f| f.len()))));
    }
    if poses.iter().any(|p| p.len() != truth.len()) {
        return Err(Error::Alignment("tracks and ground truth differ in length".into()));
    }
    let cost: Vec<Vec<f64>> = poses
        .iter()
        .map(|seq| {
            (0..n)
                .map(|g| {
                    seq.frames
                        .iter()
                        .zip(truth)
                        .map(|(f, gt)| {
                            (0..NUM_KEYPOINTS).filter(|&j| f.valid[j]).map(|j| (f.keypoints[j] - gt[g][j]).norm()).sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    crate::observe::min_cost_assignment(&cost)
        .into_iter()
        .map(|c| c.ok_or_else(|| Error::Alignment("subjects could not be matched".into())))
        .collect()
}

/// Root-aligned keypoint error of refined tracks (mm), averaged over
/// subjects and frames.
pub fn tracking_mpjpe(poses: &[Pose3DSequence], truth: &[Vec<Keypoints>]) -> Result<f64> {
    let map = match_subjects(poses, truth)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, seq) in poses.iter().enumerate() {
        for (f, gt) in seq.frames.iter().zip(truth) {
            sum += joint_errors(&f.keypoints, &gt[map[s]], None)?.rooted;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("empty sequence".into()));
    }
    Ok(sum / count as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct FrameErrors {
    joints: AlignedErrors,
    vertices: AlignedErrors,
}

fn subject_frame(template: &BodyTemplate, pred: &BodyParams, truth: &BodyParams) -> Result<FrameErrors> {
    let kp = forward_kinematics(template, pred)?;
    let gt = forward_kinematics(template, truth)?;
    let joints = joint_errors(&kp, &gt, None)?;
    let vp = surface_vertices(template, pred)?;
    let vg = surface_vertices(template, truth)?;
    let vertices = vertex_errors(&vp, &vg, Some((pelvis(&kp), pelvis(&gt))))?;
    Ok(FrameErrors { joints, vertices })
}

/// Full report of fitted bodies against the scene's ground truth.
pub fn evaluate(output: &PipelineOutput, scene: &Scene, config: &PipelineConfig) -> Result<MetricsReport> {
    let gt: &Scenario = scene.ground_truth.as_ref().ok_or(Error::NoGroundTruth)?;
    let template = config.template();
    let truth = gt.keypoints(&template)?;
    let map = match_subjects(&output.tracking.poses, &truth)?;
    let params = &output.fit.params;
    let frames = truth.len();
    if params.len() != map.len() || params.iter().any(|p| p.len() != frames) {
        return Err(Error::Alignment("fit and ground truth differ in shape".into()));
    }

    let per_frame = par::map_range(frames, |t| {
        (0..map.len()).map(|s| subject_frame(&template, &params[s][t], &gt.params[t][map[s]])).collect::<Result<Vec<_>>>()
    });
    let per_frame = per_frame.into_iter().collect::<Result<Vec<_>>>()?;

    let subjects: Vec<SubjectMetrics> = (0..map.len())
        .map(|s| {
            let col = |f: fn(&FrameErrors) -> f64| mean(&per_frame.iter().map(|fr| f(&fr[s])).collect::<Vec<_>>());
            SubjectMetrics {
                mpjpe: col(|e| e.joints.rooted),
                pa_mpjpe: col(|e| e.joints.procrustes),
                n_mpjpe: col(|e| e.joints.normalized),
                pve: col(|e| e.vertices.rooted),
                pa_pve: col(|e| e.vertices.procrustes),
                n_pve: col(|e| e.vertices.normalized),
            }
        })
        .collect();
    let frame_mean = |f: fn(&FrameErrors) -> f64| -> Vec<f64> {
        per_frame.iter().map(|fr| mean(&fr.iter().map(f).collect::<Vec<_>>())).collect()
    };

    let predicted: Vec<Vec<PersonPose>> = (0..frames)
        .map(|t| {
            params.iter().map(|p| forward_kinematics(&template, &p[t]).map(PersonPose::new)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let reference: Vec<Vec<PersonPose>> = truth.iter().map(|f| f.iter().map(|k| PersonPose::new(*k)).collect()).collect();
    let detection = detection_scores(&predicted, &reference, config.pck_threshold_mm)?;

    let collision = if map.len() == 2 {
        let meshes: Vec<Vec<_>> = params
            .iter()
            .map(|seq| seq.iter().map(|p| PosedBody::new(&template, p).map(|b| b.mesh(&template))).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Some(collision_scores(&meshes[0], &meshes[1], config.voxel_size)?)
    } else {
        None
    };

    let traces = MetricTraces {
        mpjpe: frame_mean(|e| e.joints.rooted),
        pa_mpjpe: frame_mean(|e| e.joints.procrustes),
        n_mpjpe: frame_mean(|e| e.joints.normalized),
        pve: frame_mean(|e| e.vertices.rooted),
        pa_pve: frame_mean(|e| e.vertices.procrustes),
        n_pve: frame_mean(|e| e.vertices.normalized),
        p2s: collision.as_ref().map_or_else(Vec::new, |c| c.frames.iter().map(|f| f.p2s).collect()),
        iou: collision.as_ref().map_or_else(Vec::new, |c| c.frames.iter().map(|f| f.iou).collect()),
        ioa: collision.as_ref().map_or_else(Vec::new, |c| c.frames.iter().map(|f| f.ioa).collect()),
    };
    Ok(MetricsReport {
        mpjpe: mean(&traces.mpjpe),
        pa_mpjpe: mean(&traces.pa_mpjpe),
        n_mpjpe: mean(&traces.n_mpjpe),
        pve: mean(&traces.pve),
        pa_pve: mean(&traces.pa_pve),
        n_pve: mean(&traces.n_pve),
        pck3d: detection.pck3d,
        auc: detection.auc,
        f1: detection.f1,
        mp2s: collision.as_ref().map_or(0.0, |c| c.mp2s),
        miou: collision.as_ref().map_or(0.0, |c| c.miou),
        mioa: collision.as_ref().map_or(0.0, |c| c.mioa),
        subjects,
        traces,
    })
}
