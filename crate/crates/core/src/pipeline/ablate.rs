//! Camera-count and collision-loss ablations.

use serde::{Deserialize, Serialize};

use super::{fit, ground_truth_keypoints, simulate_with, track, tracking_mpjpe, PipelineConfig, Scene, Tracking};
use crate::body::{PosedBody, PosedMesh};
use crate::error::{Error, Result};
use crate::meshfit::FitResult;
use crate::metrics::collision_scores;
use crate::par;
use crate::simulate::{make_rig, Scenario};

/// One camera count: tracking MPJPE in mm, or why the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraAblationRow {
    pub cameras: usize,
    pub mpjpe: Option<f64>,
    pub error: Option<String>,
}

impl CameraAblationRow {
    pub const CSV_HEADER: &'static str = "cameras,mpjpe_mm,error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.cameras,
            self.mpjpe.map_or(String::new(), |m| format!("{m:.6}")),
            self.error.as_deref().unwrap_or("").replace(',', ";")
        )
    }
}

/// Re-renders `scenario` with each camera count on the configured ring and
/// scores the refined keypoint tracks. Rows fail independently.
pub fn ablate_cameras(scenario: &Scenario, counts: &[usize], config: &PipelineConfig) -> Result<Vec<CameraAblationRow>> {
    config.validate()?;
    if let Some(&bad) = counts.iter().find(|&&c| c < 2 || c > config.rig.cameras) {
        return Err(Error::InvalidParameter(format!("camera count {bad} outside [2, {}]", config.rig.cameras)));
    }
    let rows = par::map(counts, |&n| {
        let run = || -> Result<f64> {
            let rig = make_rig(
                n,
                config.rig.radius,
                config.rig.height,
                (config.rig.resolution[0], config.rig.resolution[1]),
                scenario.fps,
            )?;
            let sim = simulate_with(config, scenario.clone(), rig)?;
            let tracking = track(&sim.scene, config)?;
            let truth = ground_truth_keypoints(&sim.scene, &config.template())?;
            tracking_mpjpe(&tracking.poses, &truth)
        };
        match run() {
            Ok(m) => CameraAblationRow { cameras: n, mpjpe: Some(m), error: None },
            Err(e) => CameraAblationRow { cameras: n, mpjpe: None, error: Some(e.to_string()) },
        }
    });
    Ok(rows)
}

/// Collision scores of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionRow {
    pub collision_loss: bool,
    pub w7: f64,
    pub mp2s: f64,
    pub miou: f64,
    pub mioa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionAblation {
    pub tracking: Tracking,
    /// Without the collision term first, then with it.
    pub rows: Vec<CollisionRow>,
    pub fits: Vec<FitResult>,
}

impl CollisionAblation {
    pub const CSV_HEADER: &'static str = "collision_loss,w7,mp2s_mm,miou_pct,mioa_m2";

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.collision_loss, r.w7, r.mp2s, r.miou, r.mioa));
        }
        out
    }
}

fn meshes(config: &PipelineConfig, fit: &FitResult) -> Result<Vec<Vec<PosedMesh>>> {
    let template = config.template();
    fit.params
        .iter()
        .map(|seq| seq.iter().map(|p| PosedBody::new(&template, p).map(|b| b.mesh(&template))).collect())
        .collect()
}

/// Tracks the scene once, then fits it with and without the collision term.
pub fn ablate_collision(scene: &Scene, config: &PipelineConfig) -> Result<CollisionAblation> {
    let tracking = track(scene, config)?;
    if tracking.poses.len() != 2 {
        return Err(Error::InvalidInput("the collision ablation needs two subjects".into()));
    }
    let configs = [config.without_collision(), config.clone()];
    let fits = par::map(&configs, |c| fit(&tracking, c));
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(2);
    for (c, f) in configs.iter().zip(&fits) {
        let m = meshes(c, f)?;
        let scores = collision_scores(&m[0], &m[1], c.voxel_size)?;
        rows.push(CollisionRow {
            collision_loss: c.weights.w7 > 0.0,
            w7: c.weights.w7,
            mp2s: scores.mp2s,
            miou: scores.miou,
            mioa: scores.mioa,
        });
    }
    Ok(CollisionAblation { tracking, rows, fits })
}
