//! Sampled signed-distance grid with trilinear lookup.
//!
//! The analytic capsule distance is exact; this grid exists to compare
//! against grid-based penetration evaluators.

use nalgebra::Vector3;

use super::sdf::CapsuleSet;

#[derive(Debug, Clone)]
pub struct VoxelSdf {
    origin: Vector3<f64>,
    spacing: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

impl VoxelSdf {
    /// Samples `capsules` on a grid of `spacing` covering their bounds plus `margin`.
    pub fn build(capsules: &CapsuleSet, spacing: f64, margin: f64) -> Self {
        assert!(spacing > 0.0 && !capsules.is_empty());
        let (lo, hi) = capsules.aabb();
        let origin = lo - Vector3::repeat(margin);
        let extent = hi - lo + Vector3::repeat(2.0 * margin);
        let dims = [0, 1, 2].map(|k| (extent[k] / spacing).ceil() as usize + 1);
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64) * spacing;
                    values.push(capsules.signed_distance(&p));
                }
            }
        }
        Self { origin, spacing, dims, values }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.dims[1] + j) * self.dims[0] + i]
    }

    /// Trilinear interpolation; queries outside the grid are clamped to its boundary.
    pub fn signed_distance(&self, q: &Vector3<f64>) -> f64 {
        let g = (q - self.origin) / self.spacing;
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let x = g[a].clamp(0.0, max);
            let i = (x.floor() as usize).min(self.dims[a].saturating_sub(2));
            idx[a] = i;
            frac[a] = x - i as f64;
        }
        let [i, j, k] = idx;
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.at(i, j, k), self.at(i + 1, j, k), fx);
        let c10 = lerp(self.at(i, j + 1, k), self.at(i + 1, j + 1, k), fx);
        let c01 = lerp(self.at(i, j, k + 1), self.at(i + 1, j, k + 1), fx);
        let c11 = lerp(self.at(i, j + 1, k + 1), self.at(i + 1, j + 1, k + 1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    pub fn penetration_depth(&self, q: &Vector3<f64>) -> f64 {
        (-self.signed_distance(q)).max(0.0)
    }
}
