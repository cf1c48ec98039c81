//! Pre-contact grouping of per-view detections into subjects.

use nalgebra::Vector3;

use super::{Scene, NUM_SUBJECTS};
use crate::body::NUM_KEYPOINTS;
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::observe::{min_cost_assignment, Detections2D, PersonDetection};
use crate::triangulate::{dlt_triangulate, Observation, PoseFrame};

/// `[subject][view]`: the candidate taken for that subject, if any.
pub(super) type Groups = Vec<Vec<Option<usize>>>;

/// Cost of a pairing that cannot be evaluated.
const UNMATCHED: f64 = 1e9;

/// A candidate needs this many visible keypoints to seed identities.
const MIN_SEED_KEYPOINTS: usize = 5;

/// Most recent known position of each keypoint of one subject.
#[derive(Debug, Clone, Copy)]
pub(super) struct LastPose {
    pub keypoints: [Vector3<f64>; NUM_KEYPOINTS],
    pub known: [bool; NUM_KEYPOINTS],
}

impl Default for LastPose {
    fn default() -> Self {
        Self { keypoints: [Vector3::zeros(); NUM_KEYPOINTS], known: [false; NUM_KEYPOINTS] }
    }
}

impl LastPose {
    pub fn update(&mut self, pose: &PoseFrame) {
        for j in 0..NUM_KEYPOINTS {
            if pose.valid[j] {
                self.keypoints[j] = pose.keypoints[j];
                self.known[j] = true;
            }
        }
    }
}

fn visible_count(p: &PersonDetection) -> usize {
    p.keypoints.iter().filter(|k| k.visible).count()
}

fn mean_u(p: &PersonDetection) -> f64 {
    let (sum, n) = p.keypoints.iter().filter(|k| k.visible).fold((0.0, 0), |(s, n), k| (s + k.uv.x, n + 1));
    sum / n.max(1) as f64
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Frame-zero identities. In the view where the two best-seen people are
/// farthest apart horizontally, the left one becomes subject 0. Every other
/// view is matched to that one by two-view triangulation consistency: the
/// pairing whose rays meet best (median reprojection error) wins.
pub(super) fn bootstrap(scene: &Scene, views: &[usize], dets: &[Detections2D]) -> Result<Groups> {
    let mut reference: Option<(usize, [usize; 2], f64)> = None;
    for (v, det) in dets.iter().enumerate() {
        let mut seen: Vec<usize> =
            (0..det.persons.len()).filter(|&c| visible_count(&det.persons[c]) >= MIN_SEED_KEYPOINTS).collect();
        if seen.len() < NUM_SUBJECTS {
            continue;
        }
        seen.sort_by(|&a, &b| visible_count(&det.persons[b]).cmp(&visible_count(&det.persons[a])).then(a.cmp(&b)));
        let (mut a, mut b) = (seen[0], seen[1]);
        if mean_u(&det.persons[b]) < mean_u(&det.persons[a]) {
            std::mem::swap(&mut a, &mut b);
        }
        let gap = mean_u(&det.persons[b]) - mean_u(&det.persons[a]);
        if reference.map_or(true, |(_, _, g)| gap > g) {
            reference = Some((v, [a, b], gap));
        }
    }
    let Some((rv, ref_cands, _)) = reference else {
        return Err(Error::Pipeline("no view shows both subjects at the first frame".into()));
    };
    let ref_cam = &scene.rig.cameras[views[rv]];
    let mut groups = vec![vec![None; dets.len()]; NUM_SUBJECTS];
    for (v, det) in dets.iter().enumerate() {
        if v == rv {
            for s in 0..NUM_SUBJECTS {
                groups[s][v] = Some(ref_cands[s]);
            }
            continue;
        }
        let cam = &scene.rig.cameras[views[v]];
        let cost: Vec<Vec<f64>> = ref_cands
            .iter()
            .map(|&rc| {
                let rp = &dets[rv].persons[rc];
                det.persons
                    .iter()
                    .map(|p| {
                        let errs: Vec<f64> = (0..NUM_KEYPOINTS)
                            .filter(|&j| rp.keypoints[j].visible && p.keypoints[j].visible)
                            .filter_map(|j| {
                                let obs = [
                                    Observation { camera: ref_cam, pixel: rp.keypoints[j].uv },
                                    Observation { camera: cam, pixel: p.keypoints[j].uv },
                                ];
                                let x = dlt_triangulate(&obs).ok()?;
                                let e1 = ref_cam.reprojection_error(&x, &obs[0].pixel).ok()?;
                                let e2 = cam.reprojection_error(&x, &obs[1].pixel).ok()?;
                                Some(e1.max(e2))
                            })
                            .collect();
                        median(errs).unwrap_or(UNMATCHED)
                    })
                    .collect()
            })
            .collect();
        for (s, c) in min_cost_assignment(&cost).into_iter().enumerate() {
            groups[s][v] = c.filter(|&c| cost[s][c] < UNMATCHED);
        }
    }
    Ok(groups)
}

/// Mean pixel distance between a candidate's visible keypoints and a
/// subject's projected last known keypoints.
fn projection_cost(camera: &CameraView, last: &LastPose, person: &PersonDetection) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..NUM_KEYPOINTS {
        if !(last.known[j] && person.keypoints[j].visible) {
            continue;
        }
        let Ok(uv) = camera.project(&last.keypoints[j]) else { continue };
        sum += (uv - person.keypoints[j].uv).norm();
        n += 1;
    }
    if n == 0 {
        UNMATCHED
    } else {
        sum / n as f64
    }
}

/// Per view, repeatedly pairs a subject and a candidate that are each
/// other's nearest among those still unpaired.
pub(super) fn mutual_nearest(
    scene: &Scene,
    views: &[usize],
    dets: &[Detections2D],
    last: &[LastPose; NUM_SUBJECTS],
) -> Groups {
    let mut groups = vec![vec![None; dets.len()]; NUM_SUBJECTS];
    for (v, det) in dets.iter().enumerate() {
        let camera = &scene.rig.cameras[views[v]];
        let cost: Vec<Vec<f64>> =
            last.iter().map(|l| det.persons.iter().map(|p| projection_cost(camera, l, p)).collect()).collect();
        let mut subject_free = [true; NUM_SUBJECTS];
        let mut cand_free = vec![true; det.persons.len()];
        loop {
            let mut paired = false;
            for s in 0..NUM_SUBJECTS {
                if !subject_free[s] {
                    continue;
                }
                let nearest_c = argmin((0..det.persons.len()).filter(|&c| cand_free[c]).map(|c| (c, cost[s][c])));
                let Some(c) = nearest_c else { continue };
                let nearest_s = argmin((0..NUM_SUBJECTS).filter(|&k| subject_free[k]).map(|k| (k, cost[k][c])));
                if nearest_s == Some(s) && cost[s][c] < UNMATCHED {
                    groups[s][v] = Some(c);
                    subject_free[s] = false;
                    cand_free[c] = false;
                    paired = true;
                }
            }
            if !paired {
                break;
            }
        }
    }
    groups
}

/// Index with the smallest value; the first wins ties.
fn argmin(items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in items {
        if best.map_or(true, |(_, b)| c < b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}
