//! Articulated capsule body.
//!
//! Seventeen keypoints in COCO order form a kinematic tree rooted at the
//! nose. Every non-root keypoint owns one bone (the segment from its parent)
//! and one local 6D rotation, so a pose is a 16x6 matrix. Ten linear shape
//! coefficients change bone lengths and capsule radii. The body frame has
//! `x` to the subject's right, `y` forward and `z` up, with the origin at the
//! rest pelvis (midpoint of the hips).

mod kinematics;
pub mod rotation;
mod sdf;
mod surface;
mod voxel;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kinematics::{BodyGrad, PosedBody};
pub use sdf::{capsule_distance, capsule_distance_grad, geman_mcclure, geman_mcclure_grad, segment_closest_point,
    segment_segment_distance, Capsule, CapsuleDistanceGrad, CapsuleSet};
pub use surface::{allocate_vertices, BodySurface, LatticePoint, Patch, PosedMesh};
pub(crate) use surface::surface_backprop;
pub use voxel::VoxelSdf;

pub const NUM_KEYPOINTS: usize = 17;
pub const NUM_BONES: usize = 16;
pub const NUM_SHAPE: usize = 10;
/// Number of scalars in a flattened [`BodyParams`].
pub const NUM_PARAMS: usize = NUM_BONES * 6 + 6 + 3 + NUM_SHAPE;
pub const DEFAULT_VERTEX_COUNT: usize = 1024;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const LEFT_HIP: usize = 11;
pub const RIGHT_HIP: usize = 12;

/// Parent of each keypoint; parents always precede children.
pub const PARENTS: [Option<usize>; NUM_KEYPOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(0),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(5),
    Some(6),
    Some(11),
    Some(12),
    Some(13),
    Some(14),
];

/// Left/right keypoint pairs. Bone `j - 1` mirrors bone `k - 1` for each pair.
pub const MIRROR_PAIRS: [(usize, usize); 8] =
    [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)];

/// Bone index driven by keypoint `j` (`j >= 1`).
pub const fn bone_of(joint: usize) -> usize {
    joint - 1
}

/// Mirrored bone pairs (left, right).
pub fn mirror_bone_pairs() -> [(usize, usize); 8] {
    MIRROR_PAIRS.map(|(l, r)| (bone_of(l), bone_of(r)))
}

/// Endpoint keypoints (parent, child) of every bone.
pub fn bone_joints() -> [(usize, usize); NUM_BONES] {
    std::array::from_fn(|b| (PARENTS[b + 1].unwrap(), b + 1))
}

/// Pelvis (hip midpoint) of a keypoint set.
pub fn pelvis(keypoints: &[Vector3<f64>]) -> Vector3<f64> {
    (keypoints[LEFT_HIP] + keypoints[RIGHT_HIP]) * 0.5
}

/// Capsules spanned directly by keypoints, with the template's zero-shape radii.
pub fn keypoint_capsules(template: &BodyTemplate, keypoints: &[Vector3<f64>; NUM_KEYPOINTS]) -> CapsuleSet {
    CapsuleSet::new(
        template
            .bones
            .iter()
            .map(|b| Capsule { a: keypoints[b.joint_a], b: keypoints[b.joint_b], radius: b.base_radius })
            .collect(),
    )
}

/// One capsule of the template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub joint_a: usize,
    pub joint_b: usize,
    pub base_radius: f64,
}

/// Shape-independent definition of the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRecord", into = "TemplateRecord")]
pub struct BodyTemplate {
    pub parents: [Option<usize>; NUM_KEYPOINTS],
    /// Root keypoint position in the body frame at rest.
    pub rest_root: Vector3<f64>,
    /// Per keypoint offset from its parent, in the parent frame. Unused for the root.
    pub rest_offsets: [Vector3<f64>; NUM_KEYPOINTS],
    pub bones: [Bone; NUM_BONES],
    /// Bone length change (m) per unit of each shape coefficient.
    pub length_basis: [[f64; NUM_SHAPE]; NUM_BONES],
    /// Capsule radius change (m) per unit of each shape coefficient.
    pub radius_basis: [[f64; NUM_SHAPE]; NUM_BONES],
    pub vertex_count: usize,
    // derived
    rest_dirs: [Vector3<f64>; NUM_KEYPOINTS],
    rest_lengths: [f64; NUM_BONES],
    lattice: Vec<LatticePoint>,
    adjacent: [[bool; NUM_BONES]; NUM_BONES],
}

/// Serialized template: tree, offsets, radii and basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub parents: Vec<Option<usize>>,
    pub rest_root: [f64; 3],
    pub rest_offsets: Vec<[f64; 3]>,
    pub bones: Vec<Bone>,
    pub length_basis: Vec<[f64; NUM_SHAPE]>,
    pub radius_basis: Vec<[f64; NUM_SHAPE]>,
    pub vertex_count: usize,
}

impl TryFrom<TemplateRecord> for BodyTemplate {
    type Error = Error;
    fn try_from(r: TemplateRecord) -> Result<Self> {
        let bad = |what: &str| Error::InvalidInput(format!("template: {what}"));
        let parents: [Option<usize>; NUM_KEYPOINTS] =
            r.parents.try_into().map_err(|_| bad("expected 17 parents"))?;
        let offsets: Vec<Vector3<f64>> = r.rest_offsets.iter().map(|o| Vector3::from(*o)).collect();
        let rest_offsets: [Vector3<f64>; NUM_KEYPOINTS] =
            offsets.try_into().map_err(|_| bad("expected 17 offsets"))?;
        let bones: [Bone; NUM_BONES] = r.bones.try_into().map_err(|_| bad("expected 16 bones"))?;
        let length_basis = r.length_basis.try_into().map_err(|_| bad("expected 16 length basis rows"))?;
        let radius_basis = r.radius_basis.try_into().map_err(|_| bad("expected 16 radius basis rows"))?;
        BodyTemplate::new(
            parents,
            Vector3::from(r.rest_root),
            rest_offsets,
            bones,
            length_basis,
            radius_basis,
            r.vertex_count,
        )
    }
}

impl From<BodyTemplate> for TemplateRecord {
    fn from(t: BodyTemplate) -> Self {
        Self {
            parents: t.parents.to_vec(),
            rest_root: t.rest_root.into(),
            rest_offsets: t.rest_offsets.iter().map(|o| (*o).into()).collect(),
            bones: t.bones.to_vec(),
            length_basis: t.length_basis.to_vec(),
            radius_basis: t.radius_basis.to_vec(),
            vertex_count: t.vertex_count,
        }
    }
}

impl Default for BodyTemplate {
    fn default() -> Self {
        Self::standard(DEFAULT_VERTEX_COUNT)
    }
}

impl BodyTemplate {
    pub fn new(
        parents: [Option<usize>; NUM_KEYPOINTS],
        rest_root: Vector3<f64>,
        rest_offsets: [Vector3<f64>; NUM_KEYPOINTS],
        bones: [Bone; NUM_BONES],
        length_basis: [[f64; NUM_SHAPE]; NUM_BONES],
        radius_basis: [[f64; NUM_SHAPE]; NUM_BONES],
        vertex_count: usize,
    ) -> Result<Self> {
        let bad = |what: String| Error::InvalidInput(format!("template: {what}"));
        if parents != PARENTS {
            // the tree is fixed by the keypoint convention; offsets and radii are free
            return Err(bad("kinematic tree must match the 17-keypoint convention".into()));
        }
        for (b, bone) in bones.iter().enumerate() {
            if bone.joint_b != b + 1 || Some(bone.joint_a) != parents[b + 1] {
                return Err(bad(format!("bone {b} must connect keypoint {} to its parent", b + 1)));
            }
            if !(bone.base_radius > 0.0) {
                return Err(bad(format!("bone {b} has a non-positive radius")));
            }
        }
        if vertex_count < NUM_BONES {
            return Err(bad(format!("need at least {NUM_BONES} surface vertices")));
        }
        let mut rest_dirs = [Vector3::zeros(); NUM_KEYPOINTS];
        let mut rest_lengths = [0.0; NUM_BONES];
        for j in 1..NUM_KEYPOINTS {
            let len = rest_offsets[j].norm();
            if !(len > 1e-6) {
                return Err(bad(format!("keypoint {j} has a zero-length offset")));
            }
            rest_dirs[j] = rest_offsets[j] / len;
            rest_lengths[j - 1] = len;
        }
        // every radius must stay positive over the supported coefficient range
        for b in 0..NUM_BONES {
            let worst: f64 = radius_basis[b].iter().map(|c| 3.0 * c.abs()).sum();
            if bones[b].base_radius - worst <= 0.0 {
                return Err(bad(format!("bone {b} radius can become non-positive within |shape| <= 3")));
            }
            let worst_len: f64 = length_basis[b].iter().map(|c| 3.0 * c.abs()).sum();
            if rest_lengths[b] - worst_len <= 0.0 {
                return Err(bad(format!("bone {b} length can become non-positive within |shape| <= 3")));
            }
        }
        let joints = bone_joints();
        let mut adjacent = [[false; NUM_BONES]; NUM_BONES];
        for i in 0..NUM_BONES {
            for k in 0..NUM_BONES {
                let (a0, a1) = joints[i];
                let (b0, b1) = joints[k];
                adjacent[i][k] = i == k || a0 == b0 || a0 == b1 || a1 == b0 || a1 == b1;
            }
        }
        let lattice = surface::build_lattice(&rest_dirs, &rest_lengths, &bones, vertex_count);
        Ok(Self {
            parents,
            rest_root,
            rest_offsets,
            bones,
            length_basis,
            radius_basis,
            vertex_count,
            rest_dirs,
            rest_lengths,
            lattice,
            adjacent,
        })
    }

    /// The built-in adult template with `vertex_count` surface samples.
    pub fn standard(vertex_count: usize) -> Self {
        let rest = standard_rest_positions();
        let mut offsets = [Vector3::zeros(); NUM_KEYPOINTS];
        for j in 1..NUM_KEYPOINTS {
            offsets[j] = rest[j] - rest[PARENTS[j].unwrap()];
        }
        let radii = [
            0.03, 0.03, 0.03, 0.03, // face, eye-ear
            0.04, 0.04, // neck to shoulders
            0.05, 0.05, // upper arms
            0.045, 0.045, // forearms
            0.10, 0.10, // torso sides
            0.07, 0.07, // thighs
            0.055, 0.055, // shins
        ];
        let bones = std::array::from_fn(|b| Bone {
            joint_a: PARENTS[b + 1].unwrap(),
            joint_b: b + 1,
            base_radius: radii[b],
        });
        let lengths: [f64; NUM_BONES] = std::array::from_fn(|b| offsets[b + 1].norm());
        let mut lb = [[0.0; NUM_SHAPE]; NUM_BONES];
        let mut rb = [[0.0; NUM_SHAPE]; NUM_BONES];
        for b in 0..NUM_BONES {
            let (l, r) = (lengths[b], radii[b]);
            lb[b][0] = 0.03 * l; // stature
            rb[b][1] = 0.06 * r; // girth
            let child = b + 1;
            match child {
                1..=4 => {
                    lb[b][8] = 0.05 * l; // head size
                    rb[b][8] = 0.05 * r;
                }
                5 | 6 => lb[b][7] = 0.04 * l, // shoulder width
                7 | 9 => {
                    lb[b][4] = 0.02 * l; // left arm
                    rb[b][9] = 0.05 * r;
                }
                8 | 10 => {
                    lb[b][5] = 0.02 * l; // right arm
                    rb[b][9] = 0.05 * r;
                }
                11 | 12 => lb[b][6] = 0.03 * l, // torso length
                13 | 15 => {
                    lb[b][2] = 0.02 * l; // left leg
                    rb[b][9] = 0.05 * r;
                }
                14 | 16 => {
                    lb[b][3] = 0.02 * l; // right leg
                    rb[b][9] = 0.05 * r;
                }
                _ => unreachable!(),
            }
        }
        Self::new(PARENTS, rest[0], offsets, bones, lb, rb, vertex_count).expect("standard template is valid")
    }

    /// Same template with a different surface sample count.
    pub fn with_vertex_count(&self, vertex_count: usize) -> Result<Self> {
        Self::new(
            self.parents,
            self.rest_root,
            self.rest_offsets,
            self.bones,
            self.length_basis,
            self.radius_basis,
            vertex_count,
        )
    }

    pub fn rest_direction(&self, joint: usize) -> Vector3<f64> {
        self.rest_dirs[joint]
    }

    pub fn rest_length(&self, bone: usize) -> f64 {
        self.rest_lengths[bone]
    }

    pub fn bone_length(&self, bone: usize, shape: &[f64; NUM_SHAPE]) -> f64 {
        self.rest_lengths[bone] + dot10(&self.length_basis[bone], shape)
    }

    pub fn bone_radius(&self, bone: usize, shape: &[f64; NUM_SHAPE]) -> f64 {
        self.bones[bone].base_radius + dot10(&self.radius_basis[bone], shape)
    }

    /// Whether two capsules share a keypoint (always overlapping at rest).
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacent[a][b]
    }

    pub fn lattice(&self) -> &[LatticePoint] {
        &self.lattice
    }

    /// Number of lattice samples on each bone.
    pub fn vertices_per_bone(&self) -> [usize; NUM_BONES] {
        let mut counts = [0; NUM_BONES];
        for p in &self.lattice {
            counts[p.bone] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn dot10(a: &[f64; NUM_SHAPE], b: &[f64; NUM_SHAPE]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rest keypoints of the standard template in the body frame.
pub fn standard_rest_positions() -> [Vector3<f64>; NUM_KEYPOINTS] {
    // arms hang 40 degrees from vertical
    let (s, c) = 40f64.to_radians().sin_cos();
    let sho = 0.18;
    let elb = Vector3::new(sho + 0.28 * s, 0.0, 0.48 - 0.28 * c);
    let wri = elb + Vector3::new(0.25 * s, 0.0, -0.25 * c);
    let mirror = |v: Vector3<f64>| Vector3::new(-v.x, v.y, v.z);
    let right = |v: Vector3<f64>| v;
    [
        Vector3::new(0.0, 0.09, 0.66),
        mirror(Vector3::new(0.035, 0.07, 0.72)),
        right(Vector3::new(0.035, 0.07, 0.72)),
        mirror(Vector3::new(0.08, 0.0, 0.70)),
        right(Vector3::new(0.08, 0.0, 0.70)),
        mirror(Vector3::new(sho, 0.0, 0.48)),
        right(Vector3::new(sho, 0.0, 0.48)),
        mirror(elb),
        right(elb),
        mirror(wri),
        right(wri),
        mirror(Vector3::new(0.105, 0.0, 0.0)),
        right(Vector3::new(0.105, 0.0, 0.0)),
        mirror(Vector3::new(0.105, 0.0, -0.44)),
        right(Vector3::new(0.105, 0.0, -0.44)),
        mirror(Vector3::new(0.105, 0.0, -0.86)),
        right(Vector3::new(0.105, 0.0, -0.86)),
    ]
}

/// Pose, shape and global placement of one body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Local 6D rotation of every non-root keypoint's bone.
    pub pose: [[f64; 6]; NUM_BONES],
    pub shape: [f64; NUM_SHAPE],
    pub global_orient: [f64; 6],
    /// Translation of the body frame origin in meters.
    pub global_transl: [f64; 3],
}

impl Default for BodyParams {
    fn default() -> Self {
        Self::rest()
    }
}

impl BodyParams {
    /// Identity rotations, zero shape, identity placement.
    pub fn rest() -> Self {
        Self {
            pose: [rotation::IDENTITY_6D; NUM_BONES],
            shape: [0.0; NUM_SHAPE],
            global_orient: rotation::IDENTITY_6D,
            global_transl: [0.0; 3],
        }
    }

    pub fn transl(&self) -> Vector3<f64> {
        Vector3::from(self.global_transl)
    }

    /// Checks finiteness and that every rotation decodes.
    pub fn validate(&self) -> Result<()> {
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("body parameters must be finite".into()));
        }
        rotation::decode(&self.global_orient)?;
        for r in &self.pose {
            rotation::decode(r)?;
        }
        Ok(())
    }

    /// Flattened layout: pose (96), orientation (6), translation (3), shape (10).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NUM_PARAMS);
        self.write_to(&mut v);
        v
    }

    pub fn write_to(&self, out: &mut Vec<f64>) {
        for r in &self.pose {
            out.extend_from_slice(r);
        }
        out.extend_from_slice(&self.global_orient);
        out.extend_from_slice(&self.global_transl);
        out.extend_from_slice(&self.shape);
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), NUM_PARAMS);
        let mut p = Self::rest();
        for (b, r) in p.pose.iter_mut().enumerate() {
            r.copy_from_slice(&v[b * 6..b * 6 + 6]);
        }
        let o = NUM_BONES * 6;
        p.global_orient.copy_from_slice(&v[o..o + 6]);
        p.global_transl.copy_from_slice(&v[o + 6..o + 9]);
        p.shape.copy_from_slice(&v[o + 9..o + 19]);
        p
    }
}

/// Keypoints of the posed body.
pub fn forward_kinematics(template: &BodyTemplate, params: &BodyParams) -> Result<[Vector3<f64>; NUM_KEYPOINTS]> {
    Ok(PosedBody::new(template, params)?.joints)
}

/// Surface samples of the posed body.
pub fn surface_vertices(template: &BodyTemplate, params: &BodyParams) -> Result<BodySurface> {
    Ok(PosedBody::new(template, params)?.surface(template))
}

/// Signed distance from `query` to the body's capsule union.
pub fn signed_distance(template: &BodyTemplate, params: &BodyParams, query: &Vector3<f64>) -> Result<f64> {
    Ok(PosedBody::new(template, params)?.capsules().signed_distance(query))
}

/// `max(-signed_distance, 0)`.
pub fn penetration_depth(template: &BodyTemplate, params: &BodyParams, query: &Vector3<f64>) -> Result<f64> {
    Ok(PosedBody::new(template, params)?.capsules().penetration_depth(query))
}

#[cfg(test)]
mod tests;
