//! LQR tracking of the optimized trajectory and the nominal Kalman filter
//! quantities used during execution.

use nalgebra::{DMatrix, DVector};

use crate::belief::{forward_riccati_step, CostWeights};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{MotionModel, NoiseSpec, ObservationModel};
use crate::planner::NominalTrajectory;

/// Time-indexed LQG policy around a nominal trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgPolicy {
    pub nominal: NominalTrajectory,
    /// `L_t` for `t = 0..K`.
    pub gains: Vec<DMatrix<f64>>,
    /// Predictor-form Kalman gains `K^o_t` for `t = 1..=K`, stored at `t − 1`.
    pub kalman_gains: Vec<DMatrix<f64>>,
    /// `P^f_t` for `t = 0..=K`.
    pub value_matrices: Vec<DMatrix<f64>>,
    /// Nominal estimation covariances `P^o_t` for `t = 0..=K`.
    pub covariances: Vec<DMatrix<f64>>,
}

impl LqgPolicy {
    pub fn horizon(&self) -> usize {
        self.nominal.horizon()
    }

    /// `K^o_t` for `t` in `1..=K`.
    pub fn kalman_gain(&self, t: usize) -> &DMatrix<f64> {
        &self.kalman_gains[t - 1]
    }
}

/// Backward Riccati recursion. The gain applied at time `t` is
/// `L_t = (W^u_{t+1} + B_tᵀ P_{t+1} B_t)⁻¹ B_tᵀ P_{t+1} A_t` with Jacobians at
/// `(x_t, u_t)`, and `P_t = A_tᵀ P_{t+1} A_t − A_tᵀ P_{t+1} B_t L_t + W^x_t`
/// starting from `P_K = W^x_K`. `P_0` reuses `W^x_1`.
pub fn backward_riccati(
    traj: &NominalTrajectory,
    motion: &dyn MotionModel,
    weights: &CostWeights,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let jac: Vec<_> = (0..traj.horizon())
        .map(|t| {
            let (a, b, _) = motion.jacobians(&traj.states[t], &traj.controls[t]);
            (a, b)
        })
        .collect();
    lqr_gains(&jac, weights)
}

/// Same recursion on explicit `(A_t, B_t)` pairs for `t = 0..K`.
pub fn lqr_gains(
    jacobians: &[(DMatrix<f64>, DMatrix<f64>)],
    weights: &CostWeights,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let k = jacobians.len();
    if weights.horizon() != k {
        return Err(Error::dim("backward_riccati weights", k, weights.horizon()));
    }
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    for t in 1..=k {
        let wu = weights.wu(t);
        if wu.nrows() > 0 && !(linalg::min_eigenvalue(wu) > 0.0) {
            return Err(Error::Config(format!("W^u at t={t} must be positive definite for the tracker")));
        }
    }
    let mut values = vec![DMatrix::zeros(0, 0); k + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); k];
    values[k] = weights.wx(k).clone();
    for t in (0..k).rev() {
        let (a, b) = &jacobians[t];
        let p = &values[t + 1];
        let btp = b.transpose() * p;
        let gram = linalg::symmetrize(&(weights.wu(t + 1) + &btp * b));
        let chol = gram.clone().cholesky().ok_or_else(|| Error::Numerical {
            what: "W^u + BᵀPB is not positive definite".into(),
            step: Some(t),
            condition: linalg::symmetric_condition(&gram),
        })?;
        let gain = chol.solve(&(&btp * a));
        let wx = weights.wx(t.max(1));
        let next = a.transpose() * p * a - a.transpose() * btp.transpose() * &gain + wx;
        values[t] = linalg::symmetrize(&next);
        gains[t] = gain;
    }
    Ok((values, gains))
}

/// Builds the tracker gains and the nominal filter sequence along a trajectory.
pub fn build_policy(
    traj: &NominalTrajectory,
    motion: &dyn MotionModel,
    obs: &dyn ObservationModel,
    noise: &NoiseSpec,
    weights: &CostWeights,
    p0: &DMatrix<f64>,
) -> Result<LqgPolicy> {
    let k = traj.horizon();
    let (value_matrices, gains) = backward_riccati(traj, motion, weights)?;
    let mut covariances = Vec::with_capacity(k + 1);
    let mut kalman_gains = Vec::with_capacity(k);
    covariances.push(linalg::symmetrize(p0));
    for t in 0..=k {
        // The terminal step has no control of its own; reuse the last one.
        let u = &traj.controls[t.min(k.saturating_sub(1))];
        let (a, _, g) = motion.jacobians(&traj.states[t], u);
        let (h, m) = obs.jacobians(&traj.states[t]).map_err(|e| e.at_step(t))?;
        let (gain, next) = forward_riccati_step(&covariances[t], &a, &g, &h, &m, noise).map_err(|e| e.at_step(t))?;
        if t >= 1 {
            kalman_gains.push(gain);
        }
        if t < k {
            covariances.push(next);
        }
    }
    Ok(LqgPolicy {
        nominal: traj.clone(),
        gains,
        kalman_gains,
        value_matrices,
        covariances,
    })
}

/// `u_t = u^o_t − L_t (x̂_t − x^o_t)`.
pub fn control_action(policy: &LqgPolicy, t: usize, estimate: &DVector<f64>) -> Result<DVector<f64>> {
    let k = policy.horizon();
    if t >= k {
        return Err(Error::Index { index: t, len: k });
    }
    linalg::check_len("control_action estimate", estimate, policy.nominal.states[t].len())?;
    Ok(&policy.nominal.controls[t] - &policy.gains[t] * (estimate - &policy.nominal.states[t]))
}
