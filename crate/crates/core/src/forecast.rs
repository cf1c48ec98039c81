//! Constant-velocity Kalman filters, one per keypoint.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::body::NUM_KEYPOINTS;
use crate::error::{Error, Result};

/// Number of past keypoint sets kept per subject.
pub const HISTORY_LEN: usize = 10;

/// Filter tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// White-acceleration spectral density (m/s²).
    pub accel_sigma: f64,
    /// Isotropic measurement standard deviation (m).
    pub measurement_sigma: f64,
    /// Initial position standard deviation (m).
    pub initial_position_sigma: f64,
    /// Initial velocity standard deviation (m/s).
    pub initial_velocity_sigma: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { accel_sigma: 10.0, measurement_sigma: 0.02, initial_position_sigma: 0.02, initial_velocity_sigma: 0.5 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.accel_sigma, self.measurement_sigma, self.initial_position_sigma, self.initial_velocity_sigma]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.initial_position_sigma <= 0.0 || self.initial_velocity_sigma <= 0.0 {
            return Err(Error::InvalidParameter("filter sigmas must be finite, initial sigmas positive".into()));
        }
        Ok(())
    }
}

/// Transition matrix for one step of `dt`.
pub fn transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    for k in 0..3 {
        f[(k, k + 3)] = dt;
    }
    f
}

/// Discrete white-acceleration process noise.
pub fn white_acceleration_noise(dt: f64, sigma: f64) -> Matrix6<f64> {
    let s2 = sigma * sigma;
    let mut q = Matrix6::zeros();
    for k in 0..3 {
        q[(k, k)] = s2 * dt.powi(4) / 4.0;
        q[(k, k + 3)] = s2 * dt.powi(3) / 2.0;
        q[(k + 3, k)] = s2 * dt.powi(3) / 2.0;
        q[(k + 3, k + 3)] = s2 * dt * dt;
    }
    q
}

fn observation() -> Matrix3x6<f64> {
    let mut h = Matrix3x6::zeros();
    for k in 0..3 {
        h[(k, k)] = 1.0;
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFilter {
    /// `[x, y, z, vx, vy, vz]`.
    pub state: Vector6<f64>,
    pub covariance: Matrix6<f64>,
    pub process_noise: Matrix6<f64>,
    pub measurement_noise: Matrix3<f64>,
    pub dt: f64,
}

impl KeypointFilter {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, dt: f64, config: &FilterConfig) -> Self {
        let mut covariance = Matrix6::zeros();
        for k in 0..3 {
            covariance[(k, k)] = config.initial_position_sigma.powi(2);
            covariance[(k + 3, k + 3)] = config.initial_velocity_sigma.powi(2);
        }
        Self {
            state: Vector6::new(position.x, position.y, position.z, velocity.x, velocity.y, velocity.z),
            covariance,
            process_noise: white_acceleration_noise(dt, config.accel_sigma),
            measurement_noise: Matrix3::identity() * config.measurement_sigma.powi(2),
            dt,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.state.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.state.fixed_rows::<3>(3).into_owned()
    }

    pub fn predict(&mut self) -> Vector3<f64> {
        let f = transition(self.dt);
        self.state = f * self.state;
        self.covariance = f * self.covariance * f.transpose() + self.process_noise;
        symmetrize(&mut self.covariance);
        self.position()
    }

    /// Joseph-form correction with a position measurement.
    pub fn update(&mut self, measured: &Vector3<f64>) -> Result<()> {
        let h = observation();
        let s = h * self.covariance * h.transpose() + self.measurement_noise;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("singular innovation covariance".into()))?;
        let k = self.covariance * h.transpose() * s_inv;
        self.state += k * (measured - self.position());
        let ikh = Matrix6::identity() - k * h;
        self.covariance = ikh * self.covariance * ikh.transpose() + k * self.measurement_noise * k.transpose();
        symmetrize(&mut self.covariance);
        Ok(())
    }
}

fn symmetrize(m: &mut Matrix6<f64>) {
    *m = (*m + m.transpose()) * 0.5;
}

/// Least-squares slope of `samples` taken every `dt`.
pub fn fit_velocity(samples: &[Vector3<f64>], dt: f64) -> Vector3<f64> {
    let n = samples.len() as f64;
    let t_mean = (n - 1.0) * dt / 2.0;
    // any constant reference works since the centered times sum to zero;
    // the last sample makes a constant series give exactly zero
    let p_ref = samples[samples.len() - 1];
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for (i, p) in samples.iter().enumerate() {
        let dt_i = i as f64 * dt - t_mean;
        num += (p - p_ref) * dt_i;
        den += dt_i * dt_i;
    }
    num / den
}

/// Filter bank and recent history for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSubject {
    pub subject_id: usize,
    pub filters: Vec<KeypointFilter>,
    /// Most recent last; at most [`HISTORY_LEN`] entries of (time, keypoints).
    pub history: VecDeque<(f64, [Vector3<f64>; NUM_KEYPOINTS])>,
    pub config: FilterConfig,
    time: f64,
}

impl TrackedSubject {
    /// Starts filters from the trailing window of `positions`, sampled every `dt`
    /// and ending at time `end_time`.
    pub fn init_from_history(
        subject_id: usize,
        positions: &[[Vector3<f64>; NUM_KEYPOINTS]],
        dt: f64,
        end_time: f64,
        config: &FilterConfig,
    ) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InsufficientHistory { got: positions.len(), need: 2 });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        config.validate()?;
        let window = &positions[positions.len().saturating_sub(HISTORY_LEN)..];
        if window.iter().flatten().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidParameter("history contains non-finite positions".into()));
        }
        let last = window[window.len() - 1];
        let filters = (0..NUM_KEYPOINTS)
            .map(|j| {
                let series: Vec<Vector3<f64>> = window.iter().map(|f| f[j]).collect();
                KeypointFilter::new(last[j], fit_velocity(&series, dt), dt, config)
            })
            .collect();
        let start = end_time - (window.len() - 1) as f64 * dt;
        let history = window.iter().enumerate().map(|(i, k)| (start + i as f64 * dt, *k)).collect();
        Ok(Self { subject_id, filters, history, config: *config, time: end_time })
    }

    /// Time of the current filter state.
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Advances every filter one step and returns the predicted keypoints.
    pub fn predict(&mut self) -> [Vector3<f64>; NUM_KEYPOINTS] {
        self.time += self.filters[0].dt;
        let mut out = [Vector3::zeros(); NUM_KEYPOINTS];
        for (o, f) in out.iter_mut().zip(&mut self.filters) {
            *o = f.predict();
        }
        out
    }

    /// Corrects keypoints flagged valid; the others coast on the prior.
    pub fn update(&mut self, measured: &[Vector3<f64>; NUM_KEYPOINTS], valid: &[bool; NUM_KEYPOINTS]) -> Result<()> {
        for j in 0..NUM_KEYPOINTS {
            if valid[j] && !measured[j].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidMeasurement(j));
            }
        }
        for j in 0..NUM_KEYPOINTS {
            if valid[j] {
                self.filters[j].update(&measured[j])?;
            }
        }
        let current = self.positions();
        self.history.push_back((self.time, current));
        while self.history.len() > HISTORY_LEN {
            self.history.pop_front();
        }
        Ok(())
    }

    pub fn positions(&self) -> [Vector3<f64>; NUM_KEYPOINTS] {
        std::array::from_fn(|j| self.filters[j].position())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.05;

    fn linear_history(p0: Vector3<f64>, v: Vector3<f64>, n: usize) -> Vec<[Vector3<f64>; NUM_KEYPOINTS]> {
        (0..n)
            .map(|i| std::array::from_fn(|j| p0 + Vector3::repeat(j as f64 * 0.1) + v * (i as f64 * DT)))
            .collect()
    }

    #[test]
    fn stationary_history_has_zero_velocity() {
        let h = linear_history(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), 10);
        let s = TrackedSubject::init_from_history(0, &h, DT, 0.45, &FilterConfig::default()).unwrap();
        for j in 0..NUM_KEYPOINTS {
            assert_eq!(s.filters[j].velocity(), Vector3::zeros());
            assert_eq!(s.filters[j].position(), h[9][j]);
        }
    }

    #[test]
    fn exact_linear_history_recovers_velocity() {
        let v = Vector3::new(0.7, -1.3, 0.2);
        let h = linear_history(Vector3::new(1.0, 2.0, 3.0), v, 10);
        let s = TrackedSubject::init_from_history(0, &h, DT, 0.45, &FilterConfig::default()).unwrap();
        for f in &s.filters {
            assert!((f.velocity() - v).norm() < 1e-9);
        }
    }

    #[test]
    fn noisy_slope_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(0.3 * i as f64 * DT + rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), 1.0))
            .collect();
        let v = fit_velocity(&samples, DT);
        // normal equations of [1 t] [c m]^T = x, solved per axis
        for axis in 0..3 {
            let (mut s1, mut st, mut stt, mut sx, mut stx) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, p) in samples.iter().enumerate() {
                let t = i as f64 * DT;
                s1 += 1.0;
                st += t;
                stt += t * t;
                sx += p[axis];
                stx += t * p[axis];
            }
            let slope = (s1 * stx - st * sx) / (s1 * stt - st * st);
            assert!((v[axis] - slope).abs() < 1e-9);
        }
    }

    #[test]
    fn short_history_is_rejected() {
        let h = linear_history(Vector3::zeros(), Vector3::zeros(), 1);
        assert!(matches!(
            TrackedSubject::init_from_history(0, &h, DT, 0.0, &FilterConfig::default()),
            Err(Error::InsufficientHistory { got: 1, need: 2 })
        ));
    }

    #[test]
    fn predict_moves_by_velocity() {
        let mut f = KeypointFilter::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.5, 0.0, 0.0), DT, &FilterConfig::default());
        let p = f.predict();
        assert!((p - Vector3::new(1.025, 2.0, 3.0)).norm() < 1e-15);
    }

    #[test]
    fn predict_only_covariance_matches_closed_recursion() {
        let cfg = FilterConfig::default();
        let mut f = KeypointFilter::new(Vector3::zeros(), Vector3::zeros(), DT, &cfg);
        let sigma0 = f.covariance;
        let k = 7;
        for _ in 0..k {
            f.predict();
        }
        let ft = transition(DT);
        let q = white_acceleration_noise(DT, cfg.accel_sigma);
        let pow = |n: usize| (0..n).fold(Matrix6::<f64>::identity(), |acc, _| acc * ft);
        let mut expected = pow(k) * sigma0 * pow(k).transpose();
        for i in 0..k {
            expected += pow(i) * q * pow(i).transpose();
        }
        assert!((f.covariance - expected).norm() < 1e-12);
    }

    #[test]
    fn tiny_measurement_noise_snaps_to_measurement() {
        let cfg = FilterConfig { measurement_sigma: 1e-9, ..FilterConfig::default() };
        let mut f = KeypointFilter::new(Vector3::zeros(), Vector3::zeros(), DT, &cfg);
        f.predict();
        let z = Vector3::new(0.3, -0.2, 0.1);
        f.update(&z).unwrap();
        assert!((f.position() - z).norm() < 1e-9);
    }

    #[test]
    fn invalid_keypoints_coast() {
        let h = linear_history(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 10);
        let mut s = TrackedSubject::init_from_history(0, &h, DT, 0.45, &FilterConfig::default()).unwrap();
        s.predict();
        let prior = s.filters.clone();
        s.update(&[Vector3::repeat(5.0); NUM_KEYPOINTS], &[false; NUM_KEYPOINTS]).unwrap();
        assert_eq!(s.filters, prior);
    }

    #[test]
    fn non_finite_measurement_is_rejected() {
        let h = linear_history(Vector3::zeros(), Vector3::zeros(), 3);
        let mut s = TrackedSubject::init_from_history(0, &h, DT, 0.1, &FilterConfig::default()).unwrap();
        s.predict();
        let mut m = [Vector3::zeros(); NUM_KEYPOINTS];
        m[4].y = f64::INFINITY;
        assert!(matches!(s.update(&m, &[true; NUM_KEYPOINTS]), Err(Error::InvalidMeasurement(4))));
        // an invalid keypoint may carry garbage
        let mut valid = [true; NUM_KEYPOINTS];
        valid[4] = false;
        assert!(s.update(&m, &valid).is_ok());
    }

    #[test]
    fn scalar_filter_matches_hand_rolled_gains() {
        // one axis of the filter against a scalar-by-scalar Kalman recursion
        let cfg = FilterConfig { accel_sigma: 3.0, measurement_sigma: 0.05, initial_position_sigma: 0.1, initial_velocity_sigma: 1.0 };
        let mut f = KeypointFilter::new(Vector3::zeros(), Vector3::zeros(), DT, &cfg);
        let zs = [0.02, 0.05, 0.11, 0.13, 0.2];
        let (mut x, mut v) = (0.0, 0.0);
        let (mut pxx, mut pxv, mut pvv) = (0.01, 0.0, 1.0);
        let s2 = 9.0;
        for z in zs {
            f.predict();
            x += v * DT;
            let nxx = pxx + 2.0 * DT * pxv + DT * DT * pvv + s2 * DT.powi(4) / 4.0;
            let nxv = pxv + DT * pvv + s2 * DT.powi(3) / 2.0;
            let nvv = pvv + s2 * DT * DT;
            let (kx, kv) = (nxx / (nxx + 0.0025), nxv / (nxx + 0.0025));
            let innov = z - x;
            x += kx * innov;
            v += kv * innov;
            pxx = (1.0 - kx) * nxx;
            pxv = (1.0 - kx) * nxv;
            pvv = nvv - kv * nxv;
            f.update(&Vector3::new(z, 0.0, 0.0)).unwrap();
            assert!((f.state[0] - x).abs() < 1e-12);
            assert!((f.state[3] - v).abs() < 1e-10);
            assert!((f.covariance[(0, 0)] - pxx).abs() < 1e-12);
            assert!((f.covariance[(0, 3)] - pxv).abs() < 1e-12);
            assert!((f.covariance[(3, 3)] - pvv).abs() < 1e-10);
        }
    }

    #[test]
    fn updating_one_keypoint_leaves_others_alone() {
        let h = linear_history(Vector3::zeros(), Vector3::new(0.2, 0.1, 0.0), 10);
        let mut s = TrackedSubject::init_from_history(0, &h, DT, 0.45, &FilterConfig::default()).unwrap();
        s.predict();
        let before = s.filters.clone();
        let mut valid = [false; NUM_KEYPOINTS];
        valid[6] = true;
        s.update(&[Vector3::repeat(0.5); NUM_KEYPOINTS], &valid).unwrap();
        for j in 0..NUM_KEYPOINTS {
            assert_eq!(s.filters[j] == before[j], j != 6);
        }
    }

    #[test]
    fn history_is_bounded() {
        let h = linear_history(Vector3::zeros(), Vector3::zeros(), 25);
        let mut s = TrackedSubject::init_from_history(0, &h, DT, 1.2, &FilterConfig::default()).unwrap();
        assert_eq!(s.history.len(), HISTORY_LEN);
        for _ in 0..5 {
            s.predict();
            s.update(&h[0], &[true; NUM_KEYPOINTS]).unwrap();
        }
        assert_eq!(s.history.len(), HISTORY_LEN);
        assert!((s.time() - 1.45).abs() < 1e-12);
    }
}
