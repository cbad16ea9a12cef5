//! Gaussian beliefs, covariance Riccati recursions, the Kalman mean update,
//! and the belief distance used to trigger replanning.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{wrap_angle, MotionModel, NoiseSpec, ObservationModel};
use crate::planner::NominalTrajectory;

/// Default Monte-Carlo sample count for [`goal_probability`].
pub const DEFAULT_GOAL_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        linalg::check_square("belief covariance", &covariance, mean.len())?;
        if !linalg::is_symmetric(&covariance, 1e-10 * (1.0 + covariance.amax())) {
            return Err(Error::Input("belief covariance must be symmetric".into()));
        }
        let covariance = linalg::symmetrize(&covariance);
        if !mean.is_empty() && linalg::min_eigenvalue(&covariance) < -1e-12 * (1.0 + covariance.amax()) {
            return Err(Error::Input("belief covariance must be positive semidefinite".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One step of the planning-stage covariance recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiStep {
    pub p_minus: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub p_plus: DMatrix<f64>,
}

/// Stage weights for `t = 1..=K`, stored at index `t − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub w_x: Vec<DMatrix<f64>>,
    pub w_u: Vec<DMatrix<f64>>,
    /// Factors with `W_tᵀ W_t = W^x_t`.
    pub w_chol: Vec<DMatrix<f64>>,
}

impl CostWeights {
    pub fn new(w_x: Vec<DMatrix<f64>>, w_u: Vec<DMatrix<f64>>) -> Result<Self> {
        if w_x.len() != w_u.len() {
            return Err(Error::dim("CostWeights horizon", w_x.len(), w_u.len()));
        }
        for (name, list) in [("W^x", &w_x), ("W^u", &w_u)] {
            for (t, m) in list.iter().enumerate() {
                if !linalg::is_symmetric(m, 1e-10 * (1.0 + m.amax())) {
                    return Err(Error::Config(format!("{name} at t={} is not symmetric", t + 1)));
                }
                if m.nrows() > 0 && linalg::min_eigenvalue(m) < -1e-12 * (1.0 + m.amax()) {
                    return Err(Error::Config(format!("{name} at t={} is not positive semidefinite", t + 1)));
                }
            }
        }
        let w_chol = w_x.iter().map(linalg::pivoted_cholesky).collect::<Result<Vec<_>>>()?;
        Ok(Self { w_x, w_u, w_chol })
    }

    /// Same weights at every stage.
    pub fn uniform(horizon: usize, w_x: DMatrix<f64>, w_u: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![w_x; horizon], vec![w_u; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.w_x.len()
    }

    /// `W^x_t` for `t` in `1..=K`.
    pub fn wx(&self, t: usize) -> &DMatrix<f64> {
        &self.w_x[t - 1]
    }

    /// `W^u_t` for `t` in `1..=K`.
    pub fn wu(&self, t: usize) -> &DMatrix<f64> {
        &self.w_u[t - 1]
    }

    /// `tr(W_t P W_tᵀ)`.
    pub fn state_cost(&self, t: usize, p: &DMatrix<f64>) -> f64 {
        let w = &self.w_chol[t - 1];
        (w * p * w.transpose()).trace()
    }
}

/// Planning-stage covariance update: prediction, innovation, gain, correction.
pub fn riccati_step(
    prev: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    h: &DMatrix<f64>,
    m: &DMatrix<f64>,
    noise: &NoiseSpec,
) -> Result<RiccatiStep> {
    let n = prev.nrows();
    linalg::check_square("riccati_step prev", prev, n)?;
    linalg::check_square("riccati_step A", a, n)?;
    linalg::check_shape("riccati_step G", g, n, noise.sigma_omega.nrows())?;
    linalg::check_shape("riccati_step H", h, h.nrows(), n)?;
    linalg::check_shape("riccati_step M", m, h.nrows(), noise.sigma_nu.nrows())?;

    let p_minus = linalg::symmetrize(&(a * prev * a.transpose() + g * &noise.sigma_omega * g.transpose()));
    let s = linalg::symmetrize(&(h * &p_minus * h.transpose() + m * &noise.sigma_nu * m.transpose()));
    let s_inv = linalg::regularized_spd_inverse(&s)?;
    let k = &p_minus * h.transpose() * s_inv;
    let p_plus = linalg::symmetrize(&((DMatrix::identity(n, n) - &k * h) * &p_minus));
    Ok(RiccatiStep { p_minus, s, k, p_plus })
}

/// Jacobians used to propagate covariance from step `t − 1` to `t`: the
/// motion model is linearized at `(x_{t−1}, u_{t−1})`, the sensor at `x_t`.
pub fn step_jacobians(
    traj: &NominalTrajectory,
    t: usize,
    motion: &dyn MotionModel,
    obs: &dyn ObservationModel,
) -> Result<[DMatrix<f64>; 4]> {
    let (a, _, g) = motion.jacobians(&traj.states[t - 1], &traj.controls[t - 1]);
    let (h, m) = obs.jacobians(&traj.states[t])?;
    Ok([a, g, h, m])
}

/// Chains [`riccati_step`] along a nominal trajectory, starting from `P⁺_0 = p0`.
/// Returns the `K` steps for `t = 1..=K`.
pub fn propagate_nominal_covariance(
    traj: &NominalTrajectory,
    motion: &dyn MotionModel,
    obs: &dyn ObservationModel,
    noise: &NoiseSpec,
    p0: &DMatrix<f64>,
) -> Result<Vec<RiccatiStep>> {
    let horizon = traj.horizon();
    let mut steps: Vec<RiccatiStep> = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let prev = steps.last().map_or(p0, |s| &s.p_plus);
        let [a, g, h, m] = step_jacobians(traj, t, motion, obs).map_err(|e| e.at_step(t))?;
        let step = riccati_step(prev, &a, &g, &h, &m, noise).map_err(|e| e.at_step(t))?;
        steps.push(step);
    }
    Ok(steps)
}

/// Linearization data for the Kalman mean update from `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KfLinearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Sensor Jacobian at `x^o_{t+1}`.
    pub h: DMatrix<f64>,
    /// `f(x^o_t, u^o_t, 0) − A x^o_t − B u^o_t`.
    pub f_o: DVector<f64>,
    /// `h(x^o_{t+1}, 0) − H x^o_{t+1}`.
    pub h_o: DVector<f64>,
    /// Observation rows whose innovation is an angle.
    pub angular: Vec<usize>,
}

impl KfLinearization {
    pub fn at(
        motion: &dyn MotionModel,
        obs: &dyn ObservationModel,
        x_t: &DVector<f64>,
        u_t: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<Self> {
        let (a, b, _) = motion.jacobians(x_t, u_t);
        let f_o = motion.step(x_t, u_t) - &a * x_t - &b * u_t;
        let (h, _) = obs.jacobians(x_next)?;
        let h_o = obs.predict(x_next)? - &h * x_next;
        Ok(Self {
            a,
            b,
            h,
            f_o,
            h_o,
            angular: obs.angular_components(),
        })
    }
}

/// Kalman mean update
/// `x̂₊ = (I − K H) f^o − K h^o + A x̂ + B u + K (z − H (A x̂ + B u))`,
/// evaluated as prediction plus gain times innovation so that angular
/// innovations can be wrapped.
pub fn kf_mean_update(
    mean: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
    lin: &KfLinearization,
    gain: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = lin.a.nrows();
    linalg::check_len("kf_mean_update mean", mean, n)?;
    linalg::check_len("kf_mean_update control", u, lin.b.ncols())?;
    linalg::check_len("kf_mean_update observation", z, lin.h.nrows())?;
    linalg::check_shape("kf_mean_update gain", gain, n, lin.h.nrows())?;

    let predicted = &lin.a * mean + &lin.b * u + &lin.f_o;
    let mut innovation = z - (&lin.h_o + &lin.h * &predicted);
    for &i in &lin.angular {
        innovation[i] = wrap_angle(innovation[i]);
    }
    Ok(predicted + gain * innovation)
}

/// Execution-stage (predictor form) Riccati step. Returns the gain
/// `K = A P Hᵀ S⁻¹` and `P₊ = A (P − P Hᵀ S⁻¹ H P + G Σ_ω Gᵀ) Aᵀ`.
pub fn forward_riccati_step(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    h: &DMatrix<f64>,
    m: &DMatrix<f64>,
    noise: &NoiseSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = p.nrows();
    linalg::check_square("forward_riccati_step P", p, n)?;
    linalg::check_square("forward_riccati_step A", a, n)?;
    linalg::check_shape("forward_riccati_step G", g, n, noise.sigma_omega.nrows())?;
    linalg::check_shape("forward_riccati_step H", h, h.nrows(), n)?;
    linalg::check_shape("forward_riccati_step M", m, h.nrows(), noise.sigma_nu.nrows())?;

    let pht = p * h.transpose();
    let s = linalg::symmetrize(&(h * &pht + m * &noise.sigma_nu * m.transpose()));
    let s_inv = linalg::regularized_spd_inverse(&s)?;
    let gain = a * &pht * &s_inv;
    let inner = p - &pht * &s_inv * pht.transpose() + g * &noise.sigma_omega * g.transpose();
    let next = linalg::symmetrize(&(a * inner * a.transpose()));
    Ok((gain, next))
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    linalg::symmetrize(m)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical {
            what: format!("{what} covariance is not positive definite"),
            step: None,
            condition: linalg::symmetric_condition(m),
        })
}

/// Average of the two directed KL divergences between Gaussians. The log
/// determinant terms cancel, leaving
/// `¼ [tr(P₂⁻¹P₁) + tr(P₁⁻¹P₂) − 2n + Δᵀ(P₁⁻¹ + P₂⁻¹)Δ]`.
pub fn symmetric_kl_distance(b1: &GaussianBelief, b2: &GaussianBelief) -> Result<f64> {
    let n = b1.dim();
    if b2.dim() != n {
        return Err(Error::dim("symmetric_kl_distance", n, b2.dim()));
    }
    let inv1 = spd_inverse(&b1.covariance, "first belief")?;
    let inv2 = spd_inverse(&b2.covariance, "second belief")?;
    let delta = &b1.mean - &b2.mean;
    let traces = (&inv2 * &b1.covariance).trace() + (&inv1 * &b2.covariance).trace();
    let mahalanobis = (delta.transpose() * (inv1 + inv2) * &delta)[(0, 0)];
    Ok((0.25 * (traces - 2.0 * n as f64 + mahalanobis)).max(0.0))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `mean + L ξ` with `L Lᵀ` the covariance factored by the caller.
pub fn sample_with_factor<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, factor: &DMatrix<f64>) -> DVector<f64> {
    let xi = standard_normal_vector(rng, factor.ncols());
    mean + factor * xi
}

/// Monte-Carlo estimate of `Pr(‖x_pos − goal‖ < radius)` under the belief,
/// where `x_pos` is the first `goal.len()` state components.
pub fn goal_probability(b: &GaussianBelief, goal: &DVector<f64>, radius: f64, samples: usize, seed: u64) -> Result<f64> {
    let k = goal.len();
    if k > b.dim() {
        return Err(Error::dim("goal_probability goal", format!("at most {}", b.dim()), k));
    }
    if !(radius > 0.0) || samples == 0 {
        return Err(Error::Input("goal_probability needs a positive radius and at least one sample".into()));
    }
    let mean = b.mean.rows(0, k).into_owned();
    let cov = b.covariance.view((0, 0), (k, k)).into_owned();
    let factor = linalg::psd_factor(&cov);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r2 = radius * radius;
    let hits = (0..samples)
        .filter(|_| {
            let x = sample_with_factor(&mut rng, &mean, &factor);
            (x - goal).norm_squared() < r2
        })
        .count();
    Ok(hits as f64 / samples as f64)
}
