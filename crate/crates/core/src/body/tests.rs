use super::*;
use nalgebra::{Matrix3, Rotation3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(rng: &mut ChaCha8Rng, spread: f64) -> BodyParams {
    let mut p = BodyParams::rest();
    for r in p.pose.iter_mut() {
        for (i, v) in r.iter_mut().enumerate() {
            *v = rotation::IDENTITY_6D[i] + rng.gen_range(-spread..spread);
        }
    }
    for (i, v) in p.global_orient.iter_mut().enumerate() {
        *v = rotation::IDENTITY_6D[i] + rng.gen_range(-1.0..1.0);
    }
    for v in p.global_transl.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    for v in p.shape.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    p
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-6);
    num / den
}

fn fd_gradient(f: impl Fn(&BodyParams) -> f64, p: &BodyParams) -> Vec<f64> {
    let x = p.to_vec();
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (f(&BodyParams::from_slice(&xp)) - f(&BodyParams::from_slice(&xm))) / (2.0 * h)
        })
        .collect()
}

#[test]
fn rest_pose_reproduces_rest_positions() {
    let t = BodyTemplate::default();
    let joints = forward_kinematics(&t, &BodyParams::rest()).unwrap();
    for (j, p) in standard_rest_positions().iter().enumerate() {
        assert!((joints[j] - p).norm() < 1e-12, "keypoint {j}");
    }
    assert!(pelvis(&joints).norm() < 1e-12);
}

#[test]
fn translation_shifts_every_keypoint() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_params(&mut rng, 0.5);
    let mut q = p;
    let shift = Vector3::new(0.4, -1.2, 0.3);
    for k in 0..3 {
        q.global_transl[k] += shift[k];
    }
    let a = forward_kinematics(&t, &p).unwrap();
    let b = forward_kinematics(&t, &q).unwrap();
    for j in 0..NUM_KEYPOINTS {
        assert!((b[j] - a[j] - shift).norm() < 1e-12);
    }
}

#[test]
fn non_finite_params_are_rejected() {
    let t = BodyTemplate::default();
    let mut p = BodyParams::rest();
    p.shape[3] = f64::NAN;
    assert!(matches!(forward_kinematics(&t, &p), Err(Error::InvalidParameter(_))));
}

#[test]
fn keypoint_jacobian_matches_finite_differences() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p = random_params(&mut rng, 0.6);
        let w: [Vector3<f64>; NUM_KEYPOINTS] =
            std::array::from_fn(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let f = |p: &BodyParams| {
            let j = forward_kinematics(&t, p).unwrap();
            (0..NUM_KEYPOINTS).map(|k| w[k].dot(&j[k])).sum::<f64>()
        };
        let posed = PosedBody::new(&t, &p).unwrap();
        let g = posed.backprop(&t, &w, &Matrix3::zeros(), &[0.0; NUM_BONES]).to_vec();
        let fd = fd_gradient(f, &p);
        assert!(rel_err(&g, &fd) < 1e-4, "relative error {}", rel_err(&g, &fd));
    }
}

#[test]
fn surface_jacobian_matches_finite_differences() {
    let t = BodyTemplate::standard(200);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let p = random_params(&mut rng, 0.6);
        let w: Vec<Vector3<f64>> = (0..200)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let f = |p: &BodyParams| {
            let s = surface_vertices(&t, p).unwrap();
            s.vertices.iter().zip(&w).map(|(v, w)| v.dot(w)).sum::<f64>()
        };
        let posed = PosedBody::new(&t, &p).unwrap();
        let mut gj = [Vector3::zeros(); NUM_KEYPOINTS];
        let mut gr = Matrix3::zeros();
        let mut grad_r = [0.0; NUM_BONES];
        surface_backprop(&t, &posed, &w, &mut gj, &mut gr, &mut grad_r);
        let g = posed.backprop(&t, &gj, &gr, &grad_r).to_vec();
        let fd = fd_gradient(f, &p);
        assert!(rel_err(&g, &fd) < 1e-4, "relative error {}", rel_err(&g, &fd));
    }
}

#[test]
fn bone_lengths_are_pose_invariant() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = random_params(&mut rng, 0.8);
    let joints = bone_joints();
    let mut samples = vec![Vec::new(); NUM_BONES];
    for _ in 0..100 {
        let q = random_params(&mut rng, 0.8);
        p.pose = q.pose;
        p.global_orient = q.global_orient;
        let kp = forward_kinematics(&t, &p).unwrap();
        for (b, (a, c)) in joints.iter().enumerate() {
            samples[b].push((kp[*c] - kp[*a]).norm());
        }
    }
    for s in samples {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let sd = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        assert!(sd < 1e-9);
    }
}

#[test]
fn zero_shape_is_mirror_symmetric() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = random_params(&mut rng, 0.8);
    p.shape = [0.0; NUM_SHAPE];
    let kp = forward_kinematics(&t, &p).unwrap();
    let joints = bone_joints();
    let len = |b: usize| (kp[joints[b].1] - kp[joints[b].0]).norm();
    for (l, r) in mirror_bone_pairs() {
        assert!((len(l) - len(r)).abs() < 1e-9);
        assert_eq!(t.bones[l].base_radius, t.bones[r].base_radius);
    }
    let rest = standard_rest_positions();
    for (l, r) in MIRROR_PAIRS {
        assert!((rest[l] - Vector3::new(-rest[r].x, rest[r].y, rest[r].z)).norm() < 1e-12);
    }
}

#[test]
fn rest_surface_lies_on_capsules() {
    let t = BodyTemplate::default();
    let posed = PosedBody::new(&t, &BodyParams::rest()).unwrap();
    let s = posed.surface(&t);
    assert_eq!(s.len(), DEFAULT_VERTEX_COUNT);
    for (v, b) in s.vertices.iter().zip(&s.vertex_bone) {
        let c = posed.capsule(&t, *b);
        assert!(capsule_distance(v, &c).abs() < 1e-9);
    }
}

#[test]
fn posed_surface_lies_on_capsules() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let posed = PosedBody::new(&t, &random_params(&mut rng, 0.8)).unwrap();
    let s = posed.surface(&t);
    for (v, b) in s.vertices.iter().zip(&s.vertex_bone) {
        assert!(capsule_distance(v, &posed.capsule(&t, *b)).abs() < 1e-9);
    }
}

#[test]
fn surface_is_rigidly_equivariant() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_params(&mut rng, 0.5);
    let rot = Rotation3::new(Vector3::new(0.4, -0.9, 1.3)).into_inner();
    let shift = Vector3::new(1.0, -0.5, 0.25);
    let g0 = rotation::decode(&p.global_orient).unwrap();
    let mut q = p;
    q.global_orient = rotation::encode(&(rot * g0));
    let new_t = rot * p.transl() + shift;
    q.global_transl = [new_t.x, new_t.y, new_t.z];
    let a = surface_vertices(&t, &p).unwrap();
    let b = surface_vertices(&t, &q).unwrap();
    for (va, vb) in a.vertices.iter().zip(&b.vertices) {
        assert!((rot * va + shift - vb).norm() < 1e-9);
    }
}

#[test]
fn vertex_allocation_matches_hand_apportionment() {
    let t = BodyTemplate::standard(1024);
    let counts = t.vertices_per_bone();
    assert_eq!(counts.iter().sum::<usize>(), 1024);

    // Seat-by-seat: each extra vertex goes to the bone furthest below its quota.
    let areas: Vec<f64> = (0..NUM_BONES)
        .map(|b| {
            let r = t.bones[b].base_radius;
            let l = t.rest_length(b);
            2.0 * std::f64::consts::PI * r * l + 4.0 * std::f64::consts::PI * r * r
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let quotas: Vec<f64> = areas.iter().map(|a| a / total * 1024.0).collect();
    let mut hand: Vec<usize> = quotas.iter().map(|q| *q as usize).collect();
    while hand.iter().sum::<usize>() < 1024 {
        let mut best = 0;
        for b in 1..NUM_BONES {
            if quotas[b] - hand[b] as f64 > quotas[best] - hand[best] as f64 {
                best = b;
            }
        }
        hand[best] += 1;
    }
    assert_eq!(counts.to_vec(), hand);
    // mirrored bones receive equal shares
    for (l, r) in mirror_bone_pairs() {
        assert_eq!(counts[l], counts[r]);
    }
}

#[test]
fn apportionment_breaks_ties_toward_lower_index() {
    assert_eq!(allocate_vertices(&[1.0, 1.0, 1.0], 4), vec![2, 1, 1]);
    assert_eq!(allocate_vertices(&[1.0, 3.0], 8), vec![2, 6]);
    assert_eq!(allocate_vertices(&[], 8), Vec::<usize>::new());
}

#[test]
fn far_query_is_segment_distance_minus_radius() {
    let t = BodyTemplate::default();
    let p = BodyParams::rest();
    let q = Vector3::new(10.0, 0.0, 0.0);
    let posed = PosedBody::new(&t, &p).unwrap();
    let expected = (0..NUM_BONES)
        .map(|b| {
            let c = posed.capsule(&t, b);
            let (_, cp) = segment_closest_point(&q, &c.a, &c.b);
            (q - cp).norm() - c.radius
        })
        .fold(f64::INFINITY, f64::min);
    let d = signed_distance(&t, &p, &q).unwrap();
    assert!(d > 0.0);
    assert!((d - expected).abs() < 1e-9);
    assert_eq!(penetration_depth(&t, &p, &q).unwrap(), 0.0);
}

#[test]
fn axis_query_returns_negative_radius() {
    let t = BodyTemplate::default();
    let p = BodyParams::rest();
    let posed = PosedBody::new(&t, &p).unwrap();
    // middle of the left shin: no other capsule reaches it
    let c = posed.capsule(&t, 14);
    let q = (c.a + c.b) * 0.5;
    assert!((signed_distance(&t, &p, &q).unwrap() + c.radius).abs() < 1e-12);
    assert!((penetration_depth(&t, &p, &q).unwrap() - 0.055).abs() < 1e-12);
    // middle of the left thigh: radius 0.07
    let c = posed.capsule(&t, 12);
    let q = (c.a + c.b) * 0.5;
    assert!((penetration_depth(&t, &p, &q).unwrap() - 0.07).abs() < 1e-12);
}

/// Dense, independent sampling of every capsule's full surface.
fn dense_samples(caps: &CapsuleSet, spacing: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for c in &caps.capsules {
        let axis = c.b - c.a;
        let len = axis.norm();
        let d = axis / len;
        let e1 = crate::geometry::any_orthogonal(&d);
        let e2 = d.cross(&e1);
        let n_ring = (2.0 * std::f64::consts::PI * c.radius / spacing).ceil() as usize;
        let n_len = (len / spacing).ceil() as usize + 1;
        for i in 0..n_len {
            let h = i as f64 / (n_len - 1) as f64;
            for k in 0..n_ring {
                let phi = k as f64 / n_ring as f64 * 2.0 * std::f64::consts::PI;
                out.push(c.a + axis * h + (e1 * phi.cos() + e2 * phi.sin()) * c.radius);
            }
        }
        let n_sphere = (4.0 * std::f64::consts::PI * c.radius * c.radius / (spacing * spacing)).ceil() as usize * 2;
        for center in [c.a, c.b] {
            for i in 0..n_sphere {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n_sphere as f64;
                let rho = (1.0 - z * z).sqrt();
                let phi = i as f64 * 2.399_963_229_728_653;
                out.push(center + Vector3::new(rho * phi.cos(), rho * phi.sin(), z) * c.radius);
            }
        }
    }
    out
}

#[test]
fn sdf_matches_dense_surface_sampling() {
    let t = BodyTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_params(&mut rng, 0.5);
    let posed = PosedBody::new(&t, &p).unwrap();
    let caps = posed.capsules_for(&t);
    let spacing = 0.005;
    let samples = dense_samples(&caps, spacing);
    assert!(samples.len() >= 100_000, "{} samples", samples.len());
    // keep only samples on the boundary of the union
    let samples: Vec<_> = samples.into_iter().filter(|s| caps.signed_distance(s) >= -1e-9).collect();
    let (lo, hi) = caps.aabb();
    let mut checked = 0;
    for _ in 0..1000 {
        let q = Vector3::new(
            rng.gen_range(lo.x - 0.2..hi.x + 0.2),
            rng.gen_range(lo.y - 0.2..hi.y + 0.2),
            rng.gen_range(lo.z - 0.2..hi.z + 0.2),
        );
        let sdf = caps.signed_distance(&q);
        let sampled = samples.iter().map(|s| (s - q).norm()).fold(f64::INFINITY, f64::min);
        if sdf >= 0.0 {
            assert!((sdf - sampled).abs() <= 2.0 * spacing, "sdf {sdf} sampled {sampled}");
            checked += 1;
        } else {
            // inside, the deepest capsule's depth never exceeds the distance to the union boundary
            assert!(-sdf <= sampled + 2.0 * spacing);
        }
    }
    assert!(checked > 500);
}

#[test]
fn rest_pose_has_no_self_penetration() {
    let t = BodyTemplate::default();
    let posed = PosedBody::new(&t, &BodyParams::rest()).unwrap();
    let caps = posed.capsules_for(&t);
    let s = posed.surface(&t);
    for (v, b) in s.vertices.iter().zip(&s.vertex_bone) {
        let hit = caps.deepest_penetration(v, |k| !t.adjacent(*b, k));
        assert!(hit.is_none(), "vertex on bone {b} penetrates {hit:?}");
    }
}

#[test]
fn voxel_grid_tracks_analytic_distance() {
    let t = BodyTemplate::default();
    let posed = PosedBody::new(&t, &BodyParams::rest()).unwrap();
    let caps = posed.capsules_for(&t);
    let grid = VoxelSdf::build(&caps, 0.02, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (lo, hi) = caps.aabb();
    for _ in 0..500 {
        let q = Vector3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        // trilinear interpolation of a 1-Lipschitz field errs by at most a half diagonal
        assert!((grid.signed_distance(&q) - caps.signed_distance(&q)).abs() <= 0.02 * 3f64.sqrt());
    }
}

#[test]
fn template_json_round_trips() {
    let t = BodyTemplate::standard(300);
    let back = BodyTemplate::from_json(&t.to_json().unwrap()).unwrap();
    assert_eq!(t, back);
    let bad = t.to_json().unwrap().replace("\"vertex_count\": 300", "\"vertex_count\": 3");
    assert!(BodyTemplate::from_json(&bad).is_err());
}

#[test]
fn capsule_distance_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let r3 = |rng: &mut ChaCha8Rng| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let c = Capsule { a: r3(&mut rng), b: r3(&mut rng), radius: 0.1 };
        let q = r3(&mut rng);
        let (_, g) = capsule_distance_grad(&q, &c);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let fq = (capsule_distance(&(q + e), &c) - capsule_distance(&(q - e), &c)) / (2.0 * h);
            let fa = (capsule_distance(&q, &Capsule { a: c.a + e, ..c }) - capsule_distance(&q, &Capsule { a: c.a - e, ..c })) / (2.0 * h);
            let fb = (capsule_distance(&q, &Capsule { b: c.b + e, ..c }) - capsule_distance(&q, &Capsule { b: c.b - e, ..c })) / (2.0 * h);
            assert!((fq - g.query[k]).abs() < 1e-6);
            assert!((fa - g.a[k]).abs() < 1e-6);
            assert!((fb - g.b[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn geman_mcclure_derivative() {
    for &d in &[0.0, 0.01, 0.1, 0.5, 2.0] {
        let h = 1e-7;
        let fd = (geman_mcclure(d + h, 0.15) - geman_mcclure(d - h, 0.15)) / (2.0 * h);
        assert!((fd - geman_mcclure_grad(d, 0.15)).abs() < 1e-7);
    }
    assert!(geman_mcclure(100.0, 0.15) < 0.15 * 0.15);
}

proptest! {
    #[test]
    fn sdf_is_one_lipschitz(
        seed in 0u64..1000,
        p in prop::array::uniform3(-1.5f64..1.5),
        q in prop::array::uniform3(-1.5f64..1.5),
    ) {
        let t = BodyTemplate::standard(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, 0.6);
        let caps = PosedBody::new(&t, &params).unwrap().capsules_for(&t);
        let (p, q) = (Vector3::from(p) + params.transl(), Vector3::from(q) + params.transl());
        prop_assert!((caps.signed_distance(&p) - caps.signed_distance(&q)).abs() <= (p - q).norm() + 1e-9);
    }

    #[test]
    fn penetration_is_clamped_negative_sdf(q in prop::array::uniform3(-1.2f64..1.2)) {
        let t = BodyTemplate::standard(64);
        let p = BodyParams::rest();
        let q = Vector3::from(q);
        let phi = penetration_depth(&t, &p, &q).unwrap();
        prop_assert!(phi >= 0.0);
        prop_assert_eq!(phi, (-signed_distance(&t, &p, &q).unwrap()).max(0.0));
    }
}

#[test]
fn exterior_shell_has_zero_penetration() {
    let t = BodyTemplate::default();
    let posed = PosedBody::new(&t, &BodyParams::rest()).unwrap();
    let caps = posed.capsules_for(&t);
    let (lo, hi) = caps.aabb();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        // random points on a box strictly enclosing the body
        let mut q = Vector3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        let axis = rng.gen_range(0..3);
        q[axis] = if rng.gen_bool(0.5) { lo[axis] - 0.01 } else { hi[axis] + 0.01 };
        assert_eq!(caps.penetration_depth(&q), 0.0);
    }
}
