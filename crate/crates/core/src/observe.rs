//! Synthetic 2D detections and forecast-gated association.
//!
//! [`synth_detect`] stands in for a person detector: it projects the true
//! keypoints, perturbs them, hides the ones another body covers, and now and
//! then hands a keypoint to the wrong person when two people overlap in the
//! image. Candidate order within a view is shuffled, so the candidate id says
//! nothing about who is who. [`gate_associate`] undoes the damage using the
//! projected forecasts of each tracked subject.

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::{keypoint_capsules, BodyTemplate, CapsuleSet, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, CameraView};
use crate::par;

/// Width at which pixel thresholds are specified; they scale linearly with image width.
pub const REFERENCE_WIDTH: f64 = 3840.0;

/// Scales a pixel threshold given at the reference width to `width`.
pub fn scale_pixels(px: f64, width: u32) -> f64 {
    px * width as f64 / REFERENCE_WIDTH
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationModel {
    pub pixel_noise_sigma: f64,
    /// Probability that a keypoint is dropped, per keypoint per view.
    pub occlusion_rate: f64,
    /// Probability, per view per frame, that nearby keypoints of two people are exchanged.
    pub swap_rate: f64,
    /// Keypoints closer than this (at the reference width) may be exchanged.
    pub proximity_px: f64,
    pub seed: u64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self { pixel_noise_sigma: 2.0, occlusion_rate: 0.05, swap_rate: 0.1, proximity_px: 80.0, seed: 0 }
    }
}

impl ObservationModel {
    /// Exact projections, nothing dropped or exchanged.
    pub fn clean() -> Self {
        Self { pixel_noise_sigma: 0.0, occlusion_rate: 0.0, swap_rate: 0.0, proximity_px: 80.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite())
            || !rate_ok(self.occlusion_rate)
            || !rate_ok(self.swap_rate)
            || !(self.proximity_px >= 0.0)
        {
            return Err(Error::InvalidParameter("observation rates must lie in [0, 1] and sigma be >= 0".into()));
        }
        Ok(())
    }
}

/// One detected keypoint, serialized as `[u, v, confidence, visible]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Keypoint2D {
    pub uv: Vector2<f64>,
    pub confidence: f64,
    pub visible: bool,
}

impl Keypoint2D {
    pub fn hidden() -> Self {
        Self { uv: Vector2::zeros(), confidence: 0.0, visible: false }
    }
}

impl From<[f64; 4]> for Keypoint2D {
    fn from(a: [f64; 4]) -> Self {
        let visible = a[3] != 0.0;
        Self { uv: Vector2::new(a[0], a[1]), confidence: if visible { a[2] } else { 0.0 }, visible }
    }
}

impl From<Keypoint2D> for [f64; 4] {
    fn from(k: Keypoint2D) -> Self {
        [k.uv.x, k.uv.y, k.confidence, if k.visible { 1.0 } else { 0.0 }]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonDetection {
    pub candidate_id: usize,
    pub keypoints: [Keypoint2D; NUM_KEYPOINTS],
}

/// All candidate people detected in one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections2D {
    pub view_id: u32,
    pub persons: Vec<PersonDetection>,
}

/// Detections plus the generating subject of every detected keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub views: Vec<Detections2D>,
    /// `sources[view][candidate][keypoint]`: the subject whose keypoint this is.
    pub sources: Vec<Vec<[Option<usize>; NUM_KEYPOINTS]>>,
}

fn stream(seed: u64, frame: usize, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 20) ^ view as u64);
    rng
}

/// Whether keypoint `p` is hidden from `camera` by any body in `others`.
pub fn occluded(camera: &CameraView, p: &Vector3<f64>, others: &[&CapsuleSet]) -> bool {
    let c = camera.center();
    others.iter().any(|caps| caps.segment_hits(&c, p))
}

/// Renders noisy, partially hidden, partially swapped detections of every subject in every view.
pub fn synth_detect(
    gt_keypoints: &[[Vector3<f64>; NUM_KEYPOINTS]],
    template: &BodyTemplate,
    rig: &CameraRig,
    model: &ObservationModel,
    frame: usize,
) -> Result<SynthFrame> {
    model.validate()?;
    if gt_keypoints.iter().flatten().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidInput("ground-truth keypoints must be finite".into()));
    }
    let bodies: Vec<CapsuleSet> = gt_keypoints.iter().map(|k| keypoint_capsules(template, k)).collect();
    let per_view = par::map_range(rig.len(), |v| {
        detect_view(gt_keypoints, &bodies, &rig.cameras[v], model, frame, v)
    });
    let (views, sources) = per_view.into_iter().unzip();
    Ok(SynthFrame { views, sources })
}

fn detect_view(
    gt: &[[Vector3<f64>; NUM_KEYPOINTS]],
    bodies: &[CapsuleSet],
    camera: &CameraView,
    model: &ObservationModel,
    frame: usize,
    view: usize,
) -> (Detections2D, Vec<[Option<usize>; NUM_KEYPOINTS]>) {
    let mut rng = stream(model.seed, frame, view);
    let noise = Normal::new(0.0, model.pixel_noise_sigma.max(0.0)).unwrap();
    let mut people: Vec<([Keypoint2D; NUM_KEYPOINTS], [Option<usize>; NUM_KEYPOINTS])> = Vec::new();
    for (s, kps) in gt.iter().enumerate() {
        let others: Vec<&CapsuleSet> = bodies.iter().enumerate().filter(|(k, _)| *k != s).map(|(_, b)| b).collect();
        let mut out = [Keypoint2D::hidden(); NUM_KEYPOINTS];
        let mut any = false;
        for (j, p) in kps.iter().enumerate() {
            // draws happen unconditionally so the stream never depends on outcomes
            let (nu, nv) = (noise.sample(&mut rng), noise.sample(&mut rng));
            let dropped = rng.gen::<f64>() < model.occlusion_rate;
            let Ok(uv) = camera.project(p) else { continue };
            any = true;
            let uv = uv + Vector2::new(nu, nv);
            if dropped || !camera.contains(&uv) || occluded(camera, p, &others) {
                out[j] = Keypoint2D { uv, confidence: 0.0, visible: false };
            } else {
                out[j] = Keypoint2D { uv, confidence: 1.0, visible: true };
            }
        }
        if any {
            let src = std::array::from_fn(|j| out[j].visible.then_some(s));
            people.push((out, src));
        }
    }

    let swap = rng.gen::<f64>() < model.swap_rate;
    if swap && people.len() >= 2 {
        let radius = scale_pixels(model.proximity_px, camera.width);
        for j in 0..NUM_KEYPOINTS {
            let (a, b) = (people[0].0[j], people[1].0[j]);
            if a.visible && b.visible && (a.uv - b.uv).norm() < radius {
                let (left, right) = people.split_at_mut(1);
                std::mem::swap(&mut left[0].0[j], &mut right[0].0[j]);
                std::mem::swap(&mut left[0].1[j], &mut right[0].1[j]);
            }
        }
    }
    people.shuffle(&mut rng);

    let mut persons = Vec::with_capacity(people.len());
    let mut sources = Vec::with_capacity(people.len());
    for (i, (kps, src)) in people.into_iter().enumerate() {
        persons.push(PersonDetection { candidate_id: i, keypoints: kps });
        sources.push(src);
    }
    (Detections2D { view_id: camera.id, persons }, sources)
}

/// Per subject, per view keypoints after association.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `keypoints[subject][view][joint]`.
    pub keypoints: Vec<Vec<[Vector2<f64>; NUM_KEYPOINTS]>>,
    pub valid: Vec<Vec<[bool; NUM_KEYPOINTS]>>,
    /// Index into `detections[view].persons` of the candidate used.
    pub candidate: Vec<Vec<[Option<usize>; NUM_KEYPOINTS]>>,
}

/// Minimum-cost injective assignment of rows to columns (or columns to rows
/// when there are fewer columns). Returns, per row, the chosen column.
/// Candidates are enumerated in lexicographic order and only a strictly
/// cheaper assignment replaces the incumbent, so ties keep the identity-like
/// assignment that favours lower row indices.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    let k = rows.min(cols);
    let mut best: (f64, Vec<Option<usize>>) = (f64::INFINITY, vec![None; rows]);
    let mut current = vec![None; rows];
    let mut used = vec![false; cols];
    fn rec(
        r: usize,
        assigned: usize,
        k: usize,
        cost: &[Vec<f64>],
        acc: f64,
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        let rows = cost.len();
        if assigned + (rows - r) < k {
            return;
        }
        if r == rows {
            if acc < best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] && assigned < k {
                used[c] = true;
                current[r] = Some(c);
                rec(r + 1, assigned + 1, k, cost, acc + cost[r][c], current, used, best);
                current[r] = None;
                used[c] = false;
            }
        }
        rec(r + 1, assigned, k, cost, acc, current, used, best);
    }
    rec(0, 0, k, cost, 0.0, &mut current, &mut used, &mut best);
    best.1
}

/// Assigns detected keypoints to subjects by minimum summed distance to the
/// projected forecasts, then rejects assignments farther than `gate_radius`.
///
/// `forecasts_2d[subject][view]` is `None` when the forecast is behind that camera.
pub fn gate_associate(
    forecasts_2d: &[Vec<Option<[Vector2<f64>; NUM_KEYPOINTS]>>],
    detections: &[Detections2D],
    gate_radius: f64,
) -> Association {
    let n = forecasts_2d.len();
    let views = detections.len();
    let mut out = Association {
        keypoints: vec![vec![[Vector2::zeros(); NUM_KEYPOINTS]; views]; n],
        valid: vec![vec![[false; NUM_KEYPOINTS]; views]; n],
        candidate: vec![vec![[None; NUM_KEYPOINTS]; views]; n],
    };
    for (v, det) in detections.iter().enumerate() {
        for j in 0..NUM_KEYPOINTS {
            let cands: Vec<(usize, Vector2<f64>)> = det
                .persons
                .iter()
                .enumerate()
                .filter(|(_, p)| p.keypoints[j].visible)
                .map(|(i, p)| (i, p.keypoints[j].uv))
                .collect();
            if cands.is_empty() {
                continue;
            }
            // a missing forecast costs the same for every candidate
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|s| {
                    cands
                        .iter()
                        .map(|(_, uv)| forecasts_2d[s][v].map_or(1e12, |f| (f[j] - uv).norm()))
                        .collect()
                })
                .collect();
            for (s, choice) in min_cost_assignment(&cost).into_iter().enumerate() {
                let Some(c) = choice else { continue };
                let Some(f) = forecasts_2d[s][v] else { continue };
                let (idx, uv) = cands[c];
                out.keypoints[s][v][j] = uv;
                out.candidate[s][v][j] = Some(idx);
                out.valid[s][v][j] = (f[j] - uv).norm() <= gate_radius;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{forward_kinematics, BodyParams};
    use crate::simulate::make_rig;

    fn two_people(gap: f64) -> Vec<[Vector3<f64>; NUM_KEYPOINTS]> {
        let t = BodyTemplate::default();
        let mut a = BodyParams::rest();
        a.global_transl = [-gap / 2.0, 0.0, 1.0];
        let mut b = BodyParams::rest();
        b.global_transl = [gap / 2.0, 0.0, 1.0];
        vec![forward_kinematics(&t, &a).unwrap(), forward_kinematics(&t, &b).unwrap()]
    }

    fn det(points: &[Option<Vector2<f64>>]) -> Detections2D {
        Detections2D {
            view_id: 0,
            persons: points
                .iter()
                .enumerate()
                .map(|(i, p)| PersonDetection {
                    candidate_id: i,
                    keypoints: std::array::from_fn(|_| match p {
                        Some(uv) => Keypoint2D { uv: *uv, confidence: 1.0, visible: true },
                        None => Keypoint2D::hidden(),
                    }),
                })
                .collect(),
        }
    }

    #[test]
    fn clean_model_reproduces_projections() {
        let t = BodyTemplate::default();
        let rig = make_rig(8, 4.0, 1.6, (3840, 2160), 20.0).unwrap();
        // a lone subject: nothing hides anything
        let gt = vec![two_people(0.0)[0]];
        let f = synth_detect(&gt, &t, &rig, &ObservationModel::clean(), 0).unwrap();
        for (v, view) in f.views.iter().enumerate() {
            for (c, person) in view.persons.iter().enumerate() {
                for j in 0..NUM_KEYPOINTS {
                    let k = person.keypoints[j];
                    let cam = &rig.cameras[v];
                    assert!(k.visible, "view {v} candidate {c} keypoint {j}");
                    {
                        let s = f.sources[v][c][j].unwrap();
                        assert!((k.uv - cam.project(&gt[s][j]).unwrap()).norm() < 1e-9);
                        assert_eq!(k.confidence, 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn front_body_hides_the_one_behind() {
        let t = BodyTemplate::default();
        let rig = make_rig(4, 4.0, 1.6, (3840, 2160), 20.0).unwrap();
        // camera 0 sits on +x; put subject 0 between it and subject 1
        let gt = two_people(-1.2);
        let f = synth_detect(&gt, &t, &rig, &ObservationModel::clean(), 0).unwrap();
        let cam = &rig.cameras[0];
        let front = keypoint_capsules(&t, &gt[0]);
        let c = cam.center();
        let mut hidden = 0;
        let person = f.views[0]
            .persons
            .iter()
            .enumerate()
            .find(|(i, _)| f.sources[0][*i].iter().flatten().all(|s| *s == 1) && f.sources[0][*i].iter().any(|s| s.is_some()))
            .map(|(_, p)| p);
        for j in 0..NUM_KEYPOINTS {
            // dense march along the ray as an independent intersection oracle
            let p = gt[1][j];
            let mut inside = false;
            let mut margin = f64::INFINITY;
            for k in 0..=4000 {
                let q = c + (p - c) * (k as f64 / 4000.0);
                let d = front.signed_distance(&q);
                margin = margin.min(d.abs());
                inside |= d < 0.0;
            }
            let visible = person.map_or(false, |p| p.keypoints[j].visible);
            if margin > 1e-3 {
                assert_eq!(visible, !inside, "keypoint {j}");
            }
            hidden += usize::from(inside);
        }
        assert!(hidden > 10, "only {hidden} keypoints hidden");
    }

    #[test]
    fn same_seed_same_stream() {
        let t = BodyTemplate::default();
        let rig = make_rig(6, 4.0, 1.6, (1920, 1080), 20.0).unwrap();
        let gt = two_people(0.6);
        let model = ObservationModel { swap_rate: 0.5, seed: 9, ..ObservationModel::default() };
        let a = synth_detect(&gt, &t, &rig, &model, 3).unwrap();
        let b = synth_detect(&gt, &t, &rig, &model, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_detect(&gt, &t, &rig, &ObservationModel { seed: 10, ..model }, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn keypoint_json_shape() {
        let k = Keypoint2D { uv: Vector2::new(1.5, 2.0), confidence: 0.8, visible: true };
        assert_eq!(serde_json::to_string(&k).unwrap(), "[1.5,2.0,0.8,1.0]");
        let h: Keypoint2D = serde_json::from_str("[3.0,4.0,0.9,0.0]").unwrap();
        assert!(!h.visible && h.confidence == 0.0);
    }

    #[test]
    fn exact_candidates_are_kept() {
        let fa = Vector2::new(100.0, 100.0);
        let fb = Vector2::new(400.0, 100.0);
        let forecasts = vec![vec![Some([fa; NUM_KEYPOINTS])], vec![Some([fb; NUM_KEYPOINTS])]];
        let a = gate_associate(&forecasts, &[det(&[Some(fb), Some(fa)])], 50.0);
        assert!(a.valid.iter().flatten().flatten().all(|v| *v));
        assert_eq!(a.candidate[0][0][0], Some(1));
        assert_eq!(a.candidate[1][0][0], Some(0));
    }

    #[test]
    fn swapped_candidates_are_unswapped() {
        let fa = Vector2::new(100.0, 100.0);
        let fb = Vector2::new(700.0, 100.0);
        let forecasts = vec![vec![Some([fa; NUM_KEYPOINTS])], vec![Some([fb; NUM_KEYPOINTS])]];
        let ca = fa + Vector2::new(5.0, -3.0);
        let cb = fb + Vector2::new(-2.0, 4.0);
        let a = gate_associate(&forecasts, &[det(&[Some(cb), Some(ca)])], 50.0);
        let kept = (fa - ca).norm() + (fb - cb).norm();
        let other = (fa - cb).norm() + (fb - ca).norm();
        assert!(kept < other);
        assert_eq!(a.keypoints[0][0][3], ca);
        assert_eq!(a.keypoints[1][0][3], cb);
    }

    #[test]
    fn distant_single_candidate_is_gated_out() {
        let fa = Vector2::new(100.0, 100.0);
        let fb = Vector2::new(200.0, 100.0);
        let forecasts = vec![vec![Some([fa; NUM_KEYPOINTS])], vec![Some([fb; NUM_KEYPOINTS])]];
        let far = Vector2::new(150.0, 100.0 + (51.0f64.powi(2) - 50.0f64.powi(2)).sqrt());
        let a = gate_associate(&forecasts, &[det(&[Some(far)])], 50.0);
        assert!(a.valid.iter().flatten().flatten().all(|v| !*v));
        let none = gate_associate(&forecasts, &[det(&[None, None])], 50.0);
        assert!(none.valid.iter().flatten().flatten().all(|v| !*v));
    }

    #[test]
    fn assignment_cost_is_minimal_by_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let cost: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.gen_range(0.0..100.0)).collect()).collect();
            let a = min_cost_assignment(&cost);
            let chosen: f64 = a.iter().enumerate().map(|(r, c)| cost[r][c.unwrap()]).sum();
            assert!(chosen <= cost[0][0] + cost[1][1] && chosen <= cost[0][1] + cost[1][0]);
            assert_ne!(a[0], a[1]);
        }
        // ties keep the identity pairing
        assert_eq!(min_cost_assignment(&[vec![1.0, 1.0], vec![1.0, 1.0]]), vec![Some(0), Some(1)]);
        // fewer candidates than rows: the closer row wins
        assert_eq!(min_cost_assignment(&[vec![5.0], vec![2.0]]), vec![None, Some(0)]);
        assert_eq!(min_cost_assignment(&[vec![2.0, 9.0, 1.0]]), vec![Some(2)]);
    }

    #[test]
    fn invalid_model_is_rejected() {
        let m = ObservationModel { occlusion_rate: 1.5, ..ObservationModel::default() };
        assert!(m.validate().is_err());
    }
}
