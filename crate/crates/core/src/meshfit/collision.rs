//! Interpenetration penalty between posed bodies, its gradient, and
//! vertex-level contact labelling.

use nalgebra::{Matrix3, Vector3};

use crate::body::{
    capsule_distance_grad, geman_mcclure, geman_mcclure_grad, surface_backprop, BodyParams, BodySurface,
    BodyTemplate, CapsuleSet, PosedBody, NUM_BONES, NUM_KEYPOINTS,
};
use crate::error::Result;
use crate::par;

/// Gradient of a collision value with respect to one body's posed quantities.
#[derive(Debug, Clone)]
pub(crate) struct PosedGrad {
    pub joints: [Vector3<f64>; NUM_KEYPOINTS],
    pub root: Matrix3<f64>,
    pub radii: [f64; NUM_BONES],
}

impl PosedGrad {
    pub fn zero() -> Self {
        Self { joints: [Vector3::zeros(); NUM_KEYPOINTS], root: Matrix3::zeros(), radii: [0.0; NUM_BONES] }
    }
}

/// Robustified penetration summed over every vertex of `surface` that lies
/// inside an allowed capsule of `caps`. Gradients go to the vertices and to
/// the capsule owner's joints and radii.
fn penetration_sum(
    template: &BodyTemplate,
    caps: &CapsuleSet,
    surface: &BodySurface,
    scale: f64,
    self_mode: bool,
    mut grads: Option<(&mut [Vector3<f64>], &mut PosedGrad)>,
) -> f64 {
    let mut total = 0.0;
    for (v, q) in surface.vertices.iter().enumerate() {
        let bone = surface.vertex_bone[v];
        let hit = if self_mode {
            caps.deepest_penetration(q, |c| !template.adjacent(bone, c))
        } else {
            caps.deepest_penetration(q, |_| true)
        };
        let Some((depth, c)) = hit else { continue };
        total += geman_mcclure(depth, scale);
        if let Some((gv, owner)) = grads.as_mut() {
            let dr = geman_mcclure_grad(depth, scale);
            // depth = radius - |q - closest point|
            let (_, g) = capsule_distance_grad(q, &caps.capsules[c]);
            gv[v] -= g.query * dr;
            let b = &template.bones[c];
            owner.joints[b.joint_a] -= g.a * dr;
            owner.joints[b.joint_b] -= g.b * dr;
            owner.radii[c] += dr;
        }
    }
    total
}

/// Collision value of one frame with optional gradients per body.
///
/// For two or more bodies: every ordered pair (i, k), body i's capsules
/// against body k's vertices. For a single body: its vertices against its
/// own capsules that are not adjacent in the tree.
pub(crate) fn frame_collision(
    template: &BodyTemplate,
    bodies: &[&PosedBody],
    scale: f64,
    with_grad: bool,
) -> (f64, Option<Vec<PosedGrad>>) {
    let n = bodies.len();
    let caps: Vec<CapsuleSet> = bodies.iter().map(|b| b.capsules_for(template)).collect();
    let mut grads: Vec<PosedGrad> = if with_grad { vec![PosedGrad::zero(); n] } else { Vec::new() };
    let mut total = 0.0;
    if n == 1 {
        let surface = bodies[0].surface(template);
        let mut gv = vec![Vector3::zeros(); surface.len()];
        let mut owner = PosedGrad::zero();
        let g = with_grad.then_some((gv.as_mut_slice(), &mut owner));
        total = penetration_sum(template, &caps[0], &surface, scale, true, g);
        if with_grad {
            let mut out = owner;
            surface_backprop(template, bodies[0], &gv, &mut out.joints, &mut out.root, &mut out.radii);
            grads[0] = out;
        }
        return (total, with_grad.then_some(grads));
    }
    let mut surfaces: Vec<Option<BodySurface>> = vec![None; n];
    let mut vertex_grads: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); n];
    for k in 0..n {
        for i in 0..n {
            if i == k || !caps[i].aabb_overlaps(&caps[k], 0.0) {
                continue;
            }
            let surface = surfaces[k].get_or_insert_with(|| bodies[k].surface(template));
            if with_grad {
                if vertex_grads[k].is_empty() {
                    vertex_grads[k] = vec![Vector3::zeros(); surface.len()];
                }
                total += penetration_sum(template, &caps[i], surface, scale, false, Some((&mut vertex_grads[k], &mut grads[i])));
            } else {
                total += penetration_sum(template, &caps[i], surface, scale, false, None);
            }
        }
    }
    if with_grad {
        for k in 0..n {
            if !vertex_grads[k].is_empty() {
                let g = &mut grads[k];
                surface_backprop(template, bodies[k], &vertex_grads[k], &mut g.joints, &mut g.root, &mut g.radii);
            }
        }
    }
    (total, with_grad.then_some(grads))
}

/// Robustified interpenetration of one frame's bodies (self-penetration of
/// non-adjacent capsules when there is a single body).
pub fn collision_loss(template: &BodyTemplate, params: &[BodyParams], robustifier_scale: f64) -> Result<f64> {
    let posed = params.iter().map(|p| PosedBody::new(template, p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PosedBody> = posed.iter().collect();
    Ok(frame_collision(template, &refs, robustifier_scale, false).0)
}

/// Largest penetration depth of any vertex into another body (or, for one
/// body, into its own non-adjacent capsules).
pub fn max_penetration(template: &BodyTemplate, params: &[BodyParams]) -> Result<f64> {
    let posed = params.iter().map(|p| PosedBody::new(template, p)).collect::<Result<Vec<_>>>()?;
    let caps: Vec<CapsuleSet> = posed.iter().map(|b| b.capsules_for(template)).collect();
    let mut worst: f64 = 0.0;
    if posed.len() == 1 {
        let s = posed[0].surface(template);
        for (v, q) in s.vertices.iter().enumerate() {
            let b = s.vertex_bone[v];
            if let Some((d, _)) = caps[0].deepest_penetration(q, |c| !template.adjacent(b, c)) {
                worst = worst.max(d);
            }
        }
        return Ok(worst);
    }
    for k in 0..posed.len() {
        let mut surface = None;
        for i in 0..posed.len() {
            if i == k || !caps[i].aabb_overlaps(&caps[k], 0.0) {
                continue;
            }
            let s = surface.get_or_insert_with(|| posed[k].surface(template));
            for q in &s.vertices {
                if let Some((d, _)) = caps[i].deepest_penetration(q, |_| true) {
                    worst = worst.max(d);
                }
            }
        }
    }
    Ok(worst)
}

/// Largest penetration over a sequence of frames (`params[subject][frame]`).
pub fn max_penetration_sequence(template: &BodyTemplate, params: &[Vec<BodyParams>]) -> Result<f64> {
    let frames = params.first().map_or(0, |p| p.len());
    let per_frame = par::map_range(frames, |t| {
        let frame: Vec<BodyParams> = params.iter().map(|s| s[t]).collect();
        max_penetration(template, &frame)
    });
    let mut worst: f64 = 0.0;
    for v in per_frame {
        worst = worst.max(v?);
    }
    Ok(worst)
}

/// Per subject, per frame, sorted indices of surface vertices within
/// `contact_eps` of another subject's surface.
///
/// A frame where one subject has contact vertices but the other has none
/// (possible with sparse sampling) also flags the other subject's vertex
/// closest to the first subject's surface, so contact evidence is symmetric.
pub fn extract_contacts(
    template: &BodyTemplate,
    params: &[Vec<BodyParams>],
    contact_eps: f64,
) -> Result<Vec<Vec<Vec<u32>>>> {
    let n = params.len();
    let frames = params.first().map_or(0, |p| p.len());
    let per_frame = par::map_range(frames, |t| -> Result<Vec<Vec<u32>>> {
        let posed = (0..n).map(|s| PosedBody::new(template, &params[s][t])).collect::<Result<Vec<_>>>()?;
        let caps: Vec<CapsuleSet> = posed.iter().map(|b| b.capsules_for(template)).collect();
        let mut surfaces: Vec<Option<BodySurface>> = vec![None; n];
        // touching[k][i]: body k has a vertex near body i
        let mut flags: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut touching = vec![vec![false; n]; n];
        for k in 0..n {
            for i in 0..n {
                if i == k || !caps[i].aabb_overlaps(&caps[k], contact_eps) {
                    continue;
                }
                let s = surfaces[k].get_or_insert_with(|| posed[k].surface(template));
                for (v, q) in s.vertices.iter().enumerate() {
                    if let Some(d) = caps[i].near_signed_distance(q, contact_eps) {
                        if d >= -contact_eps {
                            flags[k].push(v as u32);
                            touching[k][i] = true;
                        }
                    }
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                if touching[k][i] && !touching[i][k] {
                    let s = surfaces[i].get_or_insert_with(|| posed[i].surface(template));
                    let closest = s
                        .vertices
                        .iter()
                        .enumerate()
                        .map(|(v, q)| (caps[k].signed_distance(q).abs(), v))
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|(_, v)| v as u32);
                    flags[i].extend(closest);
                }
            }
        }
        for f in flags.iter_mut() {
            f.sort_unstable();
            f.dedup();
        }
        Ok(flags)
    });
    let mut out = vec![Vec::with_capacity(frames); n];
    for frame in per_frame {
        for (s, f) in frame?.into_iter().enumerate() {
            out[s].push(f);
        }
    }
    Ok(out)
}
