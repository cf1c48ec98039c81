//! Analytic signed distance to a union of capsules.

use nalgebra::Vector3;

/// Segment `a`-`b` swept by a sphere of `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

/// Closest point on segment `a`-`b` to `q` and its parameter in `[0, 1]`.
pub fn segment_closest_point(q: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 0.0 {
        return (0.0, *a);
    }
    let t = ((q - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (t, a + ab * t)
}

/// Signed distance from `q` to one capsule.
pub fn capsule_distance(q: &Vector3<f64>, c: &Capsule) -> f64 {
    let (_, p) = segment_closest_point(q, &c.a, &c.b);
    (q - p).norm() - c.radius
}

/// Gradient of a capsule's signed distance with respect to the query, both
/// endpoints and the radius.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleDistanceGrad {
    pub query: Vector3<f64>,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

pub fn capsule_distance_grad(q: &Vector3<f64>, c: &Capsule) -> (f64, CapsuleDistanceGrad) {
    let (t, p) = segment_closest_point(q, &c.a, &c.b);
    let d = q - p;
    let n = d.norm();
    let dir = if n > 0.0 { d / n } else { Vector3::zeros() };
    (
        n - c.radius,
        CapsuleDistanceGrad { query: dir, a: -dir * (1.0 - t), b: -dir * t, radius: -1.0 },
    )
}

/// Geman-McClure robustifier `d^2 s^2 / (d^2 + s^2)`.
pub fn geman_mcclure(d: f64, scale: f64) -> f64 {
    let (d2, s2) = (d * d, scale * scale);
    d2 * s2 / (d2 + s2)
}

pub fn geman_mcclure_grad(d: f64, scale: f64) -> f64 {
    let (d2, s2) = (d * d, scale * scale);
    2.0 * d * s2 * s2 / ((d2 + s2) * (d2 + s2))
}

/// A posed capsule union with bounding spheres for culling.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleSet {
    pub capsules: Vec<Capsule>,
    bounds: Vec<(Vector3<f64>, f64)>,
    aabb: (Vector3<f64>, Vector3<f64>),
}

impl CapsuleSet {
    pub fn new(capsules: Vec<Capsule>) -> Self {
        let bounds = capsules
            .iter()
            .map(|c| ((c.a + c.b) * 0.5, (c.b - c.a).norm() * 0.5 + c.radius))
            .collect();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for c in &capsules {
            let r = Vector3::repeat(c.radius);
            lo = lo.inf(&(c.a - r)).inf(&(c.b - r));
            hi = hi.sup(&(c.a + r)).sup(&(c.b + r));
        }
        Self { capsules, bounds, aabb: (lo, hi) }
    }

    pub fn len(&self) -> usize {
        self.capsules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capsules.is_empty()
    }

    /// Axis-aligned bounds of the union.
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.aabb
    }

    /// Minimum over capsules of (axis distance - radius), with the index of the minimizer.
    pub fn signed_distance_with_index(&self, q: &Vector3<f64>) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.capsules.iter().enumerate() {
            let d = capsule_distance(q, c);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn signed_distance(&self, q: &Vector3<f64>) -> f64 {
        self.signed_distance_with_index(q).0
    }

    pub fn penetration_depth(&self, q: &Vector3<f64>) -> f64 {
        (-self.signed_distance(q)).max(0.0)
    }

    /// Deepest penetrating capsule among `allowed`, skipping capsules whose
    /// bounding sphere excludes `q`. Returns `None` when `q` is outside all of them.
    pub fn deepest_penetration(&self, q: &Vector3<f64>, allowed: impl Fn(usize) -> bool) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in self.capsules.iter().enumerate() {
            if !allowed(i) {
                continue;
            }
            let (center, r) = &self.bounds[i];
            if (q - center).norm_squared() >= r * r {
                continue;
            }
            let d = capsule_distance(q, c);
            if d < 0.0 && best.map_or(true, |(bd, _)| -d > bd) {
                best = Some((-d, i));
            }
        }
        best
    }

    /// Signed distance when `q` is within `margin` of some capsule's bounding
    /// sphere; `None` means the distance certainly exceeds `margin`.
    pub fn near_signed_distance(&self, q: &Vector3<f64>, margin: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, c) in self.capsules.iter().enumerate() {
            let (center, r) = &self.bounds[i];
            if (q - center).norm() >= r + margin {
                continue;
            }
            let d = capsule_distance(q, c);
            if best.map_or(true, |b| d < b) {
                best = Some(d);
            }
        }
        best.filter(|d| *d <= margin)
    }

    /// Whether the axis-aligned bounds of two unions, grown by `margin`, intersect.
    pub fn aabb_overlaps(&self, other: &CapsuleSet, margin: f64) -> bool {
        let (a0, a1) = self.aabb;
        let (b0, b1) = other.aabb;
        (0..3).all(|k| a0[k] - margin <= b1[k] && b0[k] - margin <= a1[k])
    }

    /// Whether `q` lies inside the axis-aligned bounds.
    pub fn aabb_contains(&self, q: &Vector3<f64>) -> bool {
        let (lo, hi) = &self.aabb;
        q.x > lo.x && q.y > lo.y && q.z > lo.z && q.x < hi.x && q.y < hi.y && q.z < hi.z
    }
}

/// Closest distance between segments `p0`-`p1` and `q0`-`q1`.
pub fn segment_segment_distance(p0: &Vector3<f64>, p1: &Vector3<f64>, q0: &Vector3<f64>, q1: &Vector3<f64>) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (s, t);
    if a <= f64::EPSILON && e <= f64::EPSILON {
        return r.norm();
    }
    if a <= f64::EPSILON {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= f64::EPSILON {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let s0 = if denom > 0.0 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            } else {
                t = t0;
                s = s0;
            }
        }
    }
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

impl CapsuleSet {
    /// Whether segment `p`-`q` passes through any capsule.
    pub fn segment_hits(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> bool {
        self.capsules.iter().any(|c| segment_segment_distance(p, q, &c.a, &c.b) < c.radius)
    }

    /// Smallest surface-to-surface gap between two capsule unions (negative when overlapping).
    pub fn gap(&self, other: &CapsuleSet) -> f64 {
        let mut best = f64::INFINITY;
        for a in &self.capsules {
            for b in &other.capsules {
                best = best.min(segment_segment_distance(&a.a, &a.b, &b.a, &b.b) - a.radius - b.radius);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segment_distance_matches_dense_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r3 = || Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for _ in 0..100 {
            let (p0, p1, q0, q1) = (r3(), r3(), r3(), r3());
            let d = segment_segment_distance(&p0, &p1, &q0, &q1);
            let mut brute = f64::INFINITY;
            for i in 0..=200 {
                let s = i as f64 / 200.0;
                let p = p0 + (p1 - p0) * s;
                let (_, c) = segment_closest_point(&p, &q0, &q1);
                brute = brute.min((p - c).norm());
            }
            assert!(d <= brute + 1e-12 && brute - d < 1e-3, "{d} vs {brute}");
        }
        let z = Vector3::zeros();
        let x = Vector3::x();
        assert!((segment_segment_distance(&z, &x, &Vector3::new(0.5, 1.0, 0.0), &Vector3::new(0.5, 2.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((segment_segment_distance(&z, &x, &(z + Vector3::y()), &(x + Vector3::y())) - 1.0).abs() < 1e-15);
    }
}
