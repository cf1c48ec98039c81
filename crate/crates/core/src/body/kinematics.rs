//! Forward kinematics and its reverse-mode derivative.

use nalgebra::{Matrix3, Vector3};

use super::rotation;
use super::sdf::{Capsule, CapsuleSet};
use super::surface::{self, BodySurface, PosedMesh};
use super::{BodyParams, BodyTemplate, NUM_BONES, NUM_KEYPOINTS, NUM_PARAMS, NUM_SHAPE};
use crate::error::Result;

/// Everything computed by one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PosedBody {
    pub params: BodyParams,
    pub joints: [Vector3<f64>; NUM_KEYPOINTS],
    /// Global frame of each keypoint's bone; entry 0 is the body orientation.
    pub frames: [Matrix3<f64>; NUM_KEYPOINTS],
    /// Local rotation of each keypoint; entry 0 is the body orientation.
    pub local: [Matrix3<f64>; NUM_KEYPOINTS],
    pub lengths: [f64; NUM_BONES],
    pub radii: [f64; NUM_BONES],
    rest_dirs: [Vector3<f64>; NUM_KEYPOINTS],
}

impl PosedBody {
    pub fn new(template: &BodyTemplate, params: &BodyParams) -> Result<Self> {
        params.validate()?;
        let mut local = [Matrix3::identity(); NUM_KEYPOINTS];
        local[0] = rotation::decode(&params.global_orient)?;
        for b in 0..NUM_BONES {
            local[b + 1] = rotation::decode(&params.pose[b])?;
        }
        let lengths = std::array::from_fn(|b| template.bone_length(b, &params.shape));
        let radii = std::array::from_fn(|b| template.bone_radius(b, &params.shape));
        let rest_dirs = std::array::from_fn(|j| template.rest_direction(j));

        let mut frames = [Matrix3::identity(); NUM_KEYPOINTS];
        let mut joints = [Vector3::zeros(); NUM_KEYPOINTS];
        frames[0] = local[0];
        joints[0] = local[0] * template.rest_root + params.transl();
        for j in 1..NUM_KEYPOINTS {
            let p = template.parents[j].unwrap();
            frames[j] = frames[p] * local[j];
            joints[j] = joints[p] + frames[j] * (rest_dirs[j] * lengths[j - 1]);
        }
        Ok(Self { params: *params, joints, frames, local, lengths, radii, rest_dirs })
    }

    pub fn root_frame(&self) -> &Matrix3<f64> {
        &self.frames[0]
    }

    pub fn capsule(&self, template: &BodyTemplate, bone: usize) -> Capsule {
        let b = &template.bones[bone];
        Capsule { a: self.joints[b.joint_a], b: self.joints[b.joint_b], radius: self.radii[bone] }
    }

    pub fn capsules_for(&self, template: &BodyTemplate) -> CapsuleSet {
        CapsuleSet::new((0..NUM_BONES).map(|b| self.capsule(template, b)).collect())
    }

    /// Capsule union of the standard tree (bone `b` joins keypoint `b + 1` and its parent).
    pub fn capsules(&self) -> CapsuleSet {
        let joints = super::bone_joints();
        CapsuleSet::new(
            (0..NUM_BONES)
                .map(|b| Capsule { a: self.joints[joints[b].0], b: self.joints[joints[b].1], radius: self.radii[b] })
                .collect(),
        )
    }

    pub fn surface(&self, template: &BodyTemplate) -> BodySurface {
        surface::pose_surface(template, self)
    }

    pub fn mesh(&self, template: &BodyTemplate) -> PosedMesh {
        PosedMesh { capsules: self.capsules_for(template), surface: self.surface(template) }
    }

    /// Pulls gradients on posed quantities back to the parameters.
    ///
    /// `grad_joints` is dL/d(keypoint), `grad_root_frame` is dL/d(frames[0])
    /// beyond its use in the tree, `grad_radii` is dL/d(capsule radius).
    pub fn backprop(
        &self,
        template: &BodyTemplate,
        grad_joints: &[Vector3<f64>; NUM_KEYPOINTS],
        grad_root_frame: &Matrix3<f64>,
        grad_radii: &[f64; NUM_BONES],
    ) -> BodyGrad {
        let mut gp = *grad_joints;
        let mut gf = [Matrix3::zeros(); NUM_KEYPOINTS];
        gf[0] = *grad_root_frame;
        let mut g_len = [0.0; NUM_BONES];
        let mut out = BodyGrad::zero();

        for j in (1..NUM_KEYPOINTS).rev() {
            let p = template.parents[j].unwrap();
            let offset = self.rest_dirs[j] * self.lengths[j - 1];
            let gj = gp[j];
            gp[p] += gj;
            gf[j] += gj * offset.transpose();
            g_len[j - 1] += self.rest_dirs[j].dot(&(self.frames[j].transpose() * gj));

            let gfj = gf[j];
            gf[p] += gfj * self.local[j].transpose();
            let g_local = self.frames[p].transpose() * gfj;
            out.pose[j - 1] = rotation::backprop(&self.params.pose[j - 1], &g_local);
        }

        out.transl = gp[0];
        gf[0] += gp[0] * template.rest_root.transpose();
        out.orient = rotation::backprop(&self.params.global_orient, &gf[0]);

        for b in 0..NUM_BONES {
            for k in 0..NUM_SHAPE {
                out.shape[k] += g_len[b] * template.length_basis[b][k] + grad_radii[b] * template.radius_basis[b][k];
            }
        }
        out
    }
}

/// Gradient with respect to [`BodyParams`], same layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyGrad {
    pub pose: [[f64; 6]; NUM_BONES],
    pub orient: [f64; 6],
    pub transl: Vector3<f64>,
    pub shape: [f64; NUM_SHAPE],
}

impl BodyGrad {
    pub fn zero() -> Self {
        Self { pose: [[0.0; 6]; NUM_BONES], orient: [0.0; 6], transl: Vector3::zeros(), shape: [0.0; NUM_SHAPE] }
    }

    pub fn add_scaled(&mut self, other: &BodyGrad, s: f64) {
        for (a, b) in self.pose.iter_mut().zip(&other.pose) {
            for i in 0..6 {
                a[i] += s * b[i];
            }
        }
        for i in 0..6 {
            self.orient[i] += s * other.orient[i];
        }
        self.transl += s * other.transl;
        for i in 0..NUM_SHAPE {
            self.shape[i] += s * other.shape[i];
        }
    }

    /// Flattened in the [`BodyParams::to_vec`] layout.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NUM_PARAMS);
        for r in &self.pose {
            v.extend_from_slice(r);
        }
        v.extend_from_slice(&self.orient);
        v.extend_from_slice(self.transl.as_slice());
        v.extend_from_slice(&self.shape);
        v
    }
}
