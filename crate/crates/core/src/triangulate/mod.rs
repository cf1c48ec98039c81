//! Linear multi-view triangulation, RANSAC over camera subsets, and
//! whole-sequence refinement.

mod refine;

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::NUM_KEYPOINTS;
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::observe::scale_pixels;

pub use refine::{refine_objective, refine_sequence, RefineWeights};

/// Views up to this count are searched exhaustively over all pairs.
pub const EXHAUSTIVE_MAX_VIEWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    /// Inlier reprojection threshold in pixels at the 3840 px reference width.
    pub reproj_threshold: f64,
    pub ransac_iterations: usize,
    pub min_views: usize,
    pub seed: u64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { reproj_threshold: 10.0, ransac_iterations: 100, min_views: 2, seed: 0 }
    }
}

impl TriangulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reproj_threshold > 0.0) || self.ransac_iterations == 0 || self.min_views < 2 {
            return Err(Error::InvalidParameter(
                "triangulation needs threshold > 0, iterations >= 1, min_views >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// One camera's view of a keypoint.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub camera: &'a CameraView,
    pub pixel: Vector2<f64>,
}

impl<'a> Observation<'a> {
    pub fn new(camera: &'a CameraView, pixel: Vector2<f64>) -> Self {
        Self { camera, pixel }
    }
}

/// Homogeneous least-squares triangulation: two normalized rows per view,
/// solved by the right singular vector of the smallest singular value.
pub fn dlt_triangulate(observations: &[Observation<'_>]) -> Result<Vector3<f64>> {
    let n = observations.len();
    if n < 2 {
        return Err(Error::InsufficientViews(n));
    }
    let c0 = observations[0].camera.center();
    if observations.iter().all(|o| (o.camera.center() - c0).norm() < 1e-9) {
        return Err(Error::DegenerateGeometry);
    }
    let mut a = DMatrix::zeros(2 * n, 4);
    for (i, o) in observations.iter().enumerate() {
        let p = o.camera.projection_matrix();
        for (r, coord, row) in [(2 * i, o.pixel.x, 0), (2 * i + 1, o.pixel.y, 1)] {
            let v = p.row(2) * coord - p.row(row);
            let norm = v.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateGeometry);
            }
            for k in 0..4 {
                a[(r, k)] = v[k] / norm;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap());
    let (smallest, second) = (order[0], order[1]);
    let largest = svd.singular_values[order[3]];
    if svd.singular_values[second] <= 1e-12 * largest {
        return Err(Error::DegenerateGeometry);
    }
    let h = v_t.row(smallest);
    let w = h[3];
    let scale = h.norm();
    if w.abs() < 1e-12 * scale {
        return Err(Error::PointAtInfinity);
    }
    Ok(Vector3::new(h[0] / w, h[1] / w, h[2] / w))
}

/// Inlier threshold for one camera.
pub fn pixel_threshold(config: &TriangulationConfig, camera: &CameraView) -> f64 {
    scale_pixels(config.reproj_threshold, camera.width)
}

/// Indices of observations that `point` reprojects onto within threshold,
/// and their summed reprojection error.
pub fn score_hypothesis(
    point: &Vector3<f64>,
    observations: &[Observation<'_>],
    config: &TriangulationConfig,
) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, o) in observations.iter().enumerate() {
        if let Ok(e) = o.camera.reprojection_error(point, &o.pixel) {
            if e < pixel_threshold(config, o.camera) {
                inliers.push(i);
                total += e;
            }
        }
    }
    (inliers, total)
}

/// Mixes a per-keypoint key into the configured seed.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        x = x.wrapping_add(*p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Pair hypotheses: every pair for small view counts, seeded samples otherwise.
fn hypotheses(n: usize, config: &TriangulationConfig, key: u64) -> Vec<(usize, usize)> {
    if n <= EXHAUSTIVE_MAX_VIEWS {
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push((i, j));
            }
        }
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[key]));
    (0..config.ransac_iterations)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

/// Outcome of a robust triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub point: Vector3<f64>,
    /// Indices into the observation slice.
    pub inliers: Vec<usize>,
}

/// RANSAC over two-view hypotheses, scored by (inlier count, total inlier
/// error), followed by re-triangulation from all inliers of the best one.
///
/// `key` selects the random stream when views are sampled rather than enumerated.
pub fn ransac_triangulate(
    observations: &[Observation<'_>],
    config: &TriangulationConfig,
    key: u64,
) -> Result<RansacResult> {
    let n = observations.len();
    if n < config.min_views.max(2) {
        return Err(Error::InsufficientViews(n));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (i, j) in hypotheses(n, config, key) {
        let Ok(p) = dlt_triangulate(&[observations[i], observations[j]]) else { continue };
        let (inliers, total) = score_hypothesis(&p, observations, config);
        let better = match &best {
            None => true,
            Some((bi, bt)) => inliers.len() > bi.len() || (inliers.len() == bi.len() && total < *bt),
        };
        if better {
            best = Some((inliers, total));
        }
    }
    let (inliers, _) = best.unwrap_or((Vec::new(), 0.0));
    if inliers.len() < config.min_views {
        return Err(Error::TriangulationFailed { best: inliers.len(), need: config.min_views });
    }
    let subset: Vec<Observation<'_>> = inliers.iter().map(|&i| observations[i]).collect();
    let point = dlt_triangulate(&subset)?;
    Ok(RansacResult { point, inliers })
}

/// One subject's keypoints at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub keypoints: [Vector3<f64>; NUM_KEYPOINTS],
    pub valid: [bool; NUM_KEYPOINTS],
    /// Number of inlier views behind each keypoint; zero when not triangulated.
    pub inliers: [usize; NUM_KEYPOINTS],
}

impl PoseFrame {
    pub fn from_keypoints(keypoints: [Vector3<f64>; NUM_KEYPOINTS]) -> Self {
        Self { keypoints, valid: [true; NUM_KEYPOINTS], inliers: [0; NUM_KEYPOINTS] }
    }
}

/// A subject's keypoint trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3DSequence {
    pub frames: Vec<PoseFrame>,
}

impl Pose3DSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn keypoints(&self) -> Vec<[Vector3<f64>; NUM_KEYPOINTS]> {
        self.frames.iter().map(|f| f.keypoints).collect()
    }
}
