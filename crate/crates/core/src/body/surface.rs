//! Capsule surface lattice.
//!
//! Each bone gets a share of the vertex budget proportional to its rest
//! capsule area. Inside a capsule the budget is split between the two
//! hemispherical caps and the cylinder by area, and each patch is covered by a
//! golden-angle spiral. Lattice directions are stored relative to the bone's
//! rest direction; when posing, the minimal rotation (in the root frame) from
//! the rest direction to the posed direction carries them along, so the
//! surface ignores bone twist.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::kinematics::PosedBody;
use super::sdf::{Capsule, CapsuleSet};
use super::{Bone, BodyTemplate, NUM_BONES, NUM_KEYPOINTS};
use crate::geometry::any_orthogonal;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Which part of a capsule a sample sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Patch {
    Cylinder,
    /// Hemisphere around the parent-side endpoint.
    CapA,
    /// Hemisphere around the child-side endpoint.
    CapB,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticePoint {
    pub bone: usize,
    pub patch: Patch,
    /// Axis parameter of the base point, 0 at the parent end.
    pub h: f64,
    /// Unit offset direction in the rest frame of the bone.
    pub u: Vector3<f64>,
    /// Number of samples sharing this patch; each carries `area / count`.
    pub patch_count: usize,
}

/// Largest-remainder apportionment of `total` proportional to `weights`;
/// equal remainders favour the lower index.
pub fn allocate_vertices(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn capsule_areas(radius: f64, length: f64) -> (f64, f64) {
    (4.0 * PI * radius * radius, 2.0 * PI * radius * length)
}

/// Splits `n` samples of one capsule into (cap A, cylinder, cap B).
fn split_counts(n: usize, radius: f64, length: f64) -> (usize, usize, usize) {
    let (cap, cyl) = capsule_areas(radius, length);
    let n_caps = ((n as f64) * cap / (cap + cyl)).round() as usize;
    let n_caps = n_caps.min(n);
    let cap_a = n_caps / 2;
    (cap_a, n - n_caps, n_caps - cap_a)
}

/// Lattice for one capsule whose axis points along `dir`.
fn capsule_points(bone: usize, dir: &Vector3<f64>, radius: f64, length: f64, n: usize) -> Vec<LatticePoint> {
    let e1 = any_orthogonal(dir);
    let e2 = dir.cross(&e1);
    let ring = |phi: f64| e1 * phi.cos() + e2 * phi.sin();
    let (na, nc, nb) = split_counts(n, radius, length);
    let mut out = Vec::with_capacity(n);
    for i in 0..na {
        let z = (i as f64 + 0.5) / na as f64;
        let u = -dir * z + ring(i as f64 * GOLDEN_ANGLE) * (1.0 - z * z).sqrt();
        out.push(LatticePoint { bone, patch: Patch::CapA, h: 0.0, u, patch_count: na });
    }
    for i in 0..nc {
        let h = (i as f64 + 0.5) / nc as f64;
        out.push(LatticePoint { bone, patch: Patch::Cylinder, h, u: ring(i as f64 * GOLDEN_ANGLE), patch_count: nc });
    }
    for i in 0..nb {
        let z = (i as f64 + 0.5) / nb as f64;
        let u = *dir * z + ring(i as f64 * GOLDEN_ANGLE) * (1.0 - z * z).sqrt();
        out.push(LatticePoint { bone, patch: Patch::CapB, h: 1.0, u, patch_count: nb });
    }
    out
}

fn patch_area(p: &LatticePoint, radius: f64, length: f64) -> f64 {
    match p.patch {
        Patch::Cylinder => 2.0 * PI * radius * length / p.patch_count as f64,
        Patch::CapA | Patch::CapB => 2.0 * PI * radius * radius / p.patch_count as f64,
    }
}

pub(crate) fn build_lattice(
    rest_dirs: &[Vector3<f64>; NUM_KEYPOINTS],
    rest_lengths: &[f64; NUM_BONES],
    bones: &[Bone; NUM_BONES],
    vertex_count: usize,
) -> Vec<LatticePoint> {
    let areas: Vec<f64> = (0..NUM_BONES)
        .map(|b| {
            let (cap, cyl) = capsule_areas(bones[b].base_radius, rest_lengths[b]);
            cap + cyl
        })
        .collect();
    let counts = allocate_vertices(&areas, vertex_count);
    let mut out = Vec::with_capacity(vertex_count);
    for b in 0..NUM_BONES {
        out.extend(capsule_points(b, &rest_dirs[b + 1], bones[b].base_radius, rest_lengths[b], counts[b]));
    }
    out
}

/// Sampled surface of a posed body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodySurface {
    pub vertices: Vec<Vector3<f64>>,
    pub vertex_bone: Vec<usize>,
    /// Surface area represented by each vertex (m²).
    pub vertex_area: Vec<f64>,
}

impl BodySurface {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Capsules and surface samples of one posed body.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub capsules: CapsuleSet,
    pub surface: BodySurface,
}

impl PosedMesh {
    /// A single capsule sampled with `n` vertices (a sphere when the endpoints coincide).
    pub fn from_capsule(capsule: Capsule, n: usize) -> Self {
        let axis = capsule.b - capsule.a;
        let length = axis.norm();
        let dir = if length > 0.0 { axis / length } else { Vector3::z() };
        let points = capsule_points(0, &dir, capsule.radius, length, n);
        let vertices = points.iter().map(|p| capsule.a + axis * p.h + p.u * capsule.radius).collect();
        let vertex_area = points.iter().map(|p| patch_area(p, capsule.radius, length)).collect();
        Self {
            capsules: CapsuleSet::new(vec![capsule]),
            surface: BodySurface { vertices, vertex_bone: vec![0; points.len()], vertex_area },
        }
    }
}

/// Minimal rotation taking unit `a` onto unit `d`.
fn min_rotation(a: &Vector3<f64>, d: &Vector3<f64>) -> Matrix3<f64> {
    let c = a.dot(d);
    if 1.0 + c < 1e-9 {
        // half turn about an axis orthogonal to `a`
        let k = any_orthogonal(a);
        return k * k.transpose() * 2.0 - Matrix3::identity();
    }
    let vx = crate::geometry::skew(&a.cross(d));
    Matrix3::identity() + vx + vx * vx / (1.0 + c)
}

/// Posed bone direction expressed in the root frame.
fn root_direction(posed: &PosedBody, a: usize, c: usize) -> (Vector3<f64>, Vector3<f64>, f64) {
    let e = posed.joints[c] - posed.joints[a];
    let n = e.norm();
    let e_hat = e / n;
    (posed.frames[0].transpose() * e_hat, e_hat, n)
}

pub(crate) fn pose_surface(template: &BodyTemplate, posed: &PosedBody) -> BodySurface {
    let lattice = template.lattice();
    let mut rots = [Matrix3::identity(); NUM_BONES];
    for (b, bone) in template.bones.iter().enumerate() {
        let (d, _, _) = root_direction(posed, bone.joint_a, bone.joint_b);
        rots[b] = posed.frames[0] * min_rotation(&template.rest_direction(b + 1), &d);
    }
    let mut vertices = Vec::with_capacity(lattice.len());
    let mut vertex_bone = Vec::with_capacity(lattice.len());
    let mut vertex_area = Vec::with_capacity(lattice.len());
    for p in lattice {
        let bone = &template.bones[p.bone];
        let (pa, pc) = (posed.joints[bone.joint_a], posed.joints[bone.joint_b]);
        let r = posed.radii[p.bone];
        vertices.push(pa * (1.0 - p.h) + pc * p.h + rots[p.bone] * p.u * r);
        vertex_bone.push(p.bone);
        vertex_area.push(patch_area(p, r, posed.lengths[p.bone]));
    }
    BodySurface { vertices, vertex_bone, vertex_area }
}

/// Accumulates gradients of a loss on surface vertices into gradients on
/// keypoints, the root frame and capsule radii.
pub(crate) fn surface_backprop(
    template: &BodyTemplate,
    posed: &PosedBody,
    grad_vertices: &[Vector3<f64>],
    grad_joints: &mut [Vector3<f64>; NUM_KEYPOINTS],
    grad_root: &mut Matrix3<f64>,
    grad_radii: &mut [f64; NUM_BONES],
) {
    let lattice = template.lattice();
    assert_eq!(lattice.len(), grad_vertices.len());
    let g_root_frame = posed.frames[0];
    for (b, bone) in template.bones.iter().enumerate() {
        let (d, e_hat, len) = root_direction(posed, bone.joint_a, bone.joint_b);
        let a = template.rest_direction(b + 1);
        let rm = min_rotation(&a, &d);
        let c = a.dot(&d);
        let v = a.cross(&d);
        let r = posed.radii[b];
        let mut g_d = Vector3::zeros();
        let mut any = false;
        for (p, g) in lattice.iter().zip(grad_vertices).filter(|(p, _)| p.bone == b) {
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            any = true;
            grad_joints[bone.joint_a] += g * (1.0 - p.h);
            grad_joints[bone.joint_b] += g * p.h;
            let w = rm * p.u;
            grad_radii[b] += g.dot(&(g_root_frame * w));
            *grad_root += g * (w * r).transpose();
            if 1.0 + c < 1e-9 {
                continue;
            }
            // w = u + v x u + v x (v x u) / (1 + c)
            let gw = g_root_frame.transpose() * g * r;
            let u = p.u;
            let q = v.cross(&u);
            let g_v = u.cross(&gw) + (q.cross(&gw) + u.cross(&gw.cross(&v))) / (1.0 + c);
            let g_c = -gw.dot(&v.cross(&q)) / ((1.0 + c) * (1.0 + c));
            g_d += g_v.cross(&a) + a * g_c;
        }
        if !any || g_d.iter().all(|x| *x == 0.0) {
            continue;
        }
        // d = G0^T e / |e|
        *grad_root += e_hat * g_d.transpose();
        let g_ehat = g_root_frame * g_d;
        let g_e = (g_ehat - e_hat * e_hat.dot(&g_ehat)) / len;
        grad_joints[bone.joint_b] += g_e;
        grad_joints[bone.joint_a] -= g_e;
    }
}
