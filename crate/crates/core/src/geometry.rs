//! Pinhole cameras, rigs and similarity alignment.
//!
//! World coordinates are metric and gravity aligned. Cameras map world points
//! to their own frame with `x_cam = R x_world + t` and then through the
//! intrinsic matrix; there is no lens distortion.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth below which a point counts as behind the camera.
pub const DEPTH_EPS: f64 = 1e-6;

/// A calibrated pinhole camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraView {
    pub id: u32,
    pub intrinsics: Matrix3<f64>,
    /// World to camera rotation.
    pub rotation: Matrix3<f64>,
    /// World to camera translation in meters.
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraView {
    /// Builds a camera and checks its invariants.
    pub fn new(
        id: u32,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self { id, intrinsics, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRig(format!("camera {} rotation is not a proper rotation", self.id)));
        }
        let (cx, cy) = (self.intrinsics[(0, 2)], self.intrinsics[(1, 2)]);
        if !(cx > 0.0 && cx < self.width as f64 && cy > 0.0 && cy < self.height as f64) {
            return Err(Error::InvalidRig(format!("camera {} principal point outside image", self.id)));
        }
        if self.intrinsics[(0, 0)] <= 0.0 || self.intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::InvalidRig(format!("camera {} focal length must be positive", self.id)));
        }
        Ok(())
    }

    /// Camera at `center` looking at `target`, with image `y` pointing
    /// away from `up` and the principal point at the image center.
    pub fn look_at(
        id: u32,
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        (width, height): (u32, u32),
    ) -> Result<Self> {
        let z = target - center;
        let x = z.cross(&up);
        if z.norm() < 1e-9 || x.norm() < 1e-9 * z.norm() {
            return Err(Error::InvalidRig(format!("camera {id} viewing direction is parallel to up")));
        }
        let z = z.normalize();
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let k = Matrix3::new(focal, 0.0, width as f64 / 2.0, 0.0, focal, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(id, k, r, -(r * center), width, height)
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        self.intrinsics * rt
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Projects a world point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        let pc = self.to_camera(p);
        if pc.z <= DEPTH_EPS {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let h = self.intrinsics * pc;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Unit ray direction (world frame) through a pixel, starting at [`Self::center`].
    pub fn back_project(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let k_inv = self.intrinsics.try_inverse().expect("intrinsics are invertible");
        let d_cam = k_inv * Vector3::new(px.x, px.y, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }

    /// Pixel distance between the projection of `p` and `obs`.
    pub fn reprojection_error(&self, p: &Vector3<f64>, obs: &Vector2<f64>) -> Result<f64> {
        Ok((self.project(p)? - obs).norm())
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Free-function form of [`CameraView::project`].
pub fn project(camera: &CameraView, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    camera.project(point)
}

/// Free-function form of [`CameraView::reprojection_error`].
pub fn reprojection_error(camera: &CameraView, point: &Vector3<f64>, obs: &Vector2<f64>) -> Result<f64> {
    camera.reprojection_error(point, obs)
}

/// A set of synchronized cameras sharing one world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationFile", into = "CalibrationFile")]
pub struct CameraRig {
    pub cameras: Vec<CameraView>,
    pub frame_rate: f64,
    pub world_up: Vector3<f64>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraView>, frame_rate: f64, world_up: Vector3<f64>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(Error::InvalidRig(format!("need at least 2 cameras, got {}", cameras.len())));
        }
        let mut ids: Vec<u32> = cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidRig("camera ids must be unique".into()));
        }
        if (world_up.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRig("world_up must have unit norm".into()));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::InvalidRig("frame rate must be positive".into()));
        }
        Ok(Self { cameras, frame_rate, world_up })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, id: u32) -> Option<&CameraView> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// Reads a calibration JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// On-disk camera record; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub intrinsics: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub resolution: [u32; 2],
}

/// On-disk calibration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub world_up: [f64; 3],
    pub frame_rate: f64,
    pub cameras: Vec<CameraRecord>,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

impl TryFrom<CameraRecord> for CameraView {
    type Error = Error;
    fn try_from(rec: CameraRecord) -> Result<Self> {
        CameraView::new(
            rec.id,
            Matrix3::from_row_slice(&rec.intrinsics),
            Matrix3::from_row_slice(&rec.rotation),
            Vector3::from(rec.translation),
            rec.resolution[0],
            rec.resolution[1],
        )
    }
}

impl From<CameraView> for CameraRecord {
    fn from(c: CameraView) -> Self {
        Self {
            id: c.id,
            intrinsics: row_major(&c.intrinsics),
            rotation: row_major(&c.rotation),
            translation: c.translation.into(),
            resolution: [c.width, c.height],
        }
    }
}

impl TryFrom<CalibrationFile> for CameraRig {
    type Error = Error;
    fn try_from(f: CalibrationFile) -> Result<Self> {
        let cameras = f.cameras.into_iter().map(CameraView::try_from).collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras, f.frame_rate, Vector3::from(f.world_up))
    }
}

impl From<CameraRig> for CalibrationFile {
    fn from(r: CameraRig) -> Self {
        Self {
            world_up: r.world_up.into(),
            frame_rate: r.frame_rate,
            cameras: r.cameras.into_iter().map(CameraRecord::from).collect(),
        }
    }
}

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity (or rigid, when `with_scale` is false) alignment
/// of `source` onto `target`.
///
/// Returns the transform and the root-mean-square residual distance.
pub fn procrustes_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(SimilarityTransform, f64)> {
    if source.len() != target.len() {
        return Err(Error::DegenerateConfiguration(format!(
            "source has {} points, target has {}",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!("need at least 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_t = target.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut src_scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        src_scatter += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let scatter_sv = src_scatter.singular_values();
    let (smax, smid) = sorted_top2(&scatter_sv);
    if smax <= 0.0 || smid <= 1e-12 * smax {
        return Err(Error::DegenerateConfiguration("source points are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let imin = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        d[(imin, imin)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale {
        (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum::<f64>() / var_s
    } else {
        1.0
    };
    let translation = mu_t - scale * (rotation * mu_s);
    let tf = SimilarityTransform { scale, rotation, translation };

    let sse: f64 = source.iter().zip(target).map(|(s, t)| (tf.apply(s) - t).norm_squared()).sum();
    Ok((tf, (sse * inv_n).sqrt()))
}

fn sorted_top2(v: &Vector3<f64>) -> (f64, f64) {
    let mut a = [v[0], v[1], v[2]];
    a.sort_by(|x, y| y.total_cmp(x));
    (a[0], a[1])
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`.
///
/// Antiparallel inputs rotate by pi about an axis orthogonal to `from`.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let v = from.cross(to);
    let c = from.dot(to);
    if c < -1.0 + 1e-12 {
        let axis = any_orthogonal(from);
        return 2.0 * axis * axis.transpose() - Matrix3::identity();
    }
    let vx = skew(&v);
    Matrix3::identity() + vx + vx * vx / (1.0 + c)
}

/// Some unit vector orthogonal to `v`.
pub fn any_orthogonal(v: &Vector3<f64>) -> Vector3<f64> {
    let pick = if v.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    v.cross(&pick).normalize()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
