//! Closed-loop execution: act, sense, filter, and replan when the belief
//! drifts away from the nominal one.

use std::fmt;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::belief::{
    goal_probability, kf_mean_update, sample_with_factor, symmetric_kl_distance, GaussianBelief, KfLinearization,
    DEFAULT_GOAL_SAMPLES,
};
use crate::controller::{build_policy, control_action, LqgPolicy};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{MotionModel, NoiseSpec, ObservationModel};
use crate::planner::{self, NominalTrajectory, PlanningProblem, SolverOptions};

/// Diagonal jitter applied to a singular nominal covariance before the
/// deviation distance is evaluated.
pub const KL_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionConfig {
    pub d_th: f64,
    pub p_g: f64,
    pub step_budget: usize,
    pub seed: u64,
    pub goal_samples: usize,
    /// Consecutive non-converged plans tolerated before aborting.
    pub max_planner_failures: usize,
}

impl ExecutionConfig {
    /// Defaults for a planning horizon `k`.
    pub fn for_horizon(k: usize) -> Self {
        Self {
            d_th: 2.0,
            p_g: 0.9,
            step_budget: 10 * k,
            seed: 0,
            goal_samples: DEFAULT_GOAL_SAMPLES,
            max_planner_failures: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_th > 0.0) {
            return Err(Error::Config("d_th must be positive".into()));
        }
        if !(self.p_g > 0.0 && self.p_g < 1.0) {
            return Err(Error::Config("p_g must lie in (0, 1)".into()));
        }
        if self.goal_samples == 0 || self.max_planner_failures == 0 {
            return Err(Error::Config("goal_samples and max_planner_failures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionStatus {
    GoalReached,
    StepBudgetExhausted,
    PlannerAborted,
}

impl ExecutionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionStatus::GoalReached => "goal_reached",
            ExecutionStatus::StepBudgetExhausted => "step_budget_exhausted",
            ExecutionStatus::PlannerAborted => "planner_aborted",
        }
    }
}

impl fmt::Display for ExecutionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One executed step. State, estimate and covariance are after the update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Index within the active plan before the step was taken.
    pub plan_step: usize,
    pub true_state: DVector<f64>,
    pub estimate: DVector<f64>,
    pub covariance_trace: f64,
    pub control: DVector<f64>,
    pub observation: DVector<f64>,
    /// Deviation distance measured before acting.
    pub kl_distance: f64,
    /// A new plan was computed before this step.
    pub replanned: bool,
    /// The plan in force did not converge.
    pub planner_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub records: Vec<StepRecord>,
    pub status: ExecutionStatus,
    pub seed: u64,
    pub initial_state: DVector<f64>,
    /// Plans computed after the first one.
    pub replans: usize,
    pub planner_warnings: usize,
    pub final_goal_probability: f64,
}

impl ExecutionTrace {
    pub fn reached_goal(&self) -> bool {
        self.status == ExecutionStatus::GoalReached
    }
}

/// Draws process and measurement noise, in that order, and returns the next
/// true state and its observation.
pub fn simulate_step<R: Rng + ?Sized>(
    true_state: &DVector<f64>,
    control: &DVector<f64>,
    motion: &dyn MotionModel,
    obs: &dyn ObservationModel,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let w = sample_with_factor(rng, &DVector::zeros(motion.noise_dim()), &linalg::psd_factor(&noise.sigma_omega));
    let nu = sample_with_factor(rng, &DVector::zeros(obs.noise_dim()), &linalg::psd_factor(&noise.sigma_nu));
    let next = motion.evaluate(true_state, control, &w);
    let z = obs.evaluate(&next, &nu)?;
    Ok((next, z))
}

/// Symmetric KL distance between the current and nominal beliefs and
/// whether it exceeds `d_th`.
pub fn detect_deviation(current: &GaussianBelief, nominal: &GaussianBelief, d_th: f64) -> Result<(f64, bool)> {
    let d = symmetric_kl_distance(current, nominal)?;
    Ok((d, d > d_th))
}

fn jittered(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.clone().cholesky().is_some() {
        cov.clone()
    } else {
        let n = cov.nrows();
        cov + DMatrix::identity(n, n) * KL_JITTER
    }
}

/// Mixes the run seed with a step counter for per-step goal sampling.
fn sub_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Planner<'a> {
    problem: &'a PlanningProblem,
    options: &'a SolverOptions,
    via: &'a [DVector<f64>],
}

impl Planner<'_> {
    /// Plans from the given belief. The previous plan's unexecuted tail, padded
    /// with zero controls, is offered as an extra seed.
    fn plan(&self, belief: &GaussianBelief, previous: Option<(&LqgPolicy, usize)>) -> Result<(LqgPolicy, bool)> {
        let mut problem = self.problem.clone();
        problem.x0_mean = belief.mean.clone();
        problem.p0 = belief.covariance.clone();
        let mut seeds = vec![planner::straight_line_seed(&problem)?];
        if !self.via.is_empty() && previous.is_none() {
            seeds.push(planner::polyline_seed(&problem, self.via)?);
        }
        if let Some((policy, t)) = previous {
            let nu = problem.motion.control_dim();
            let mut tail: Vec<DVector<f64>> = policy.nominal.controls.iter().skip(t).cloned().collect();
            tail.resize(problem.horizon, DVector::zeros(nu));
            seeds.push(tail);
        }
        let result = planner::solve_multi(&problem, &seeds, self.options)?;
        debug!(
            "planned: cost={:.6e} violation={:.2e} converged={}",
            result.cost, result.constraint_violation, result.converged
        );
        let policy = self.policy_for(&result.trajectory, &belief.covariance)?;
        Ok((policy, result.converged))
    }

    fn policy_for(&self, traj: &NominalTrajectory, p0: &DMatrix<f64>) -> Result<LqgPolicy> {
        let p = self.problem;
        build_policy(traj, p.motion.as_ref(), p.obs.as_ref(), &p.noise, &p.weights, p0)
    }
}

/// Runs the closed loop until the goal probability exceeds `p_g`, the step
/// budget is spent, or planning fails repeatedly.
pub fn run_tlqg(problem: &PlanningProblem, exec: &ExecutionConfig, options: &SolverOptions) -> Result<ExecutionTrace> {
    run_tlqg_with(problem, exec, options, None, &[])
}

/// [`run_tlqg`] with an optional precomputed first plan and optional via
/// points for the first planning seed.
pub fn run_tlqg_with(
    problem: &PlanningProblem,
    exec: &ExecutionConfig,
    options: &SolverOptions,
    initial_plan: Option<&NominalTrajectory>,
    via: &[DVector<f64>],
) -> Result<ExecutionTrace> {
    problem.validate()?;
    exec.validate()?;
    options.validate()?;
    let motion = problem.motion.as_ref();
    let obs = problem.obs.as_ref();
    let k = problem.horizon;
    let planner = Planner { problem, options, via };
    let pos = motion.position_dims();
    let goal_pos = problem.goal.rows(0, pos).into_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(exec.seed);
    let initial_state = sample_with_factor(&mut rng, &problem.x0_mean, &linalg::psd_factor(&problem.p0));
    let mut x_true = initial_state.clone();
    let mut belief = GaussianBelief::new(problem.x0_mean.clone(), problem.p0.clone())?;

    let mut policy: Option<LqgPolicy> = None;
    let mut plan_warning = false;
    if let Some(traj) = initial_plan {
        if traj.horizon() != k || (traj.states[0].clone() - &problem.x0_mean).amax() > 1e-9 {
            return Err(Error::Input("supplied plan does not start at the initial mean or has the wrong horizon".into()));
        }
        policy = Some(planner.policy_for(traj, &problem.p0)?);
    }

    let mut t = 0;
    let mut records = Vec::new();
    let mut replans = 0;
    let mut planner_warnings = 0;
    let mut consecutive_failures = 0;
    let mut step = 0;

    let status = loop {
        let probability = goal_probability(&belief, &goal_pos, problem.goal_radius, exec.goal_samples, sub_seed(exec.seed, step))?;
        if probability > exec.p_g {
            break ExecutionStatus::GoalReached;
        }
        if step >= exec.step_budget {
            break ExecutionStatus::StepBudgetExhausted;
        }

        let mut d = 0.0;
        let mut deviated = false;
        if let Some(p) = &policy {
            if t < k {
                let nominal = GaussianBelief {
                    mean: p.nominal.states[t].clone(),
                    covariance: jittered(&p.covariances[t]),
                };
                let current = GaussianBelief {
                    mean: belief.mean.clone(),
                    covariance: nominal.covariance.clone(),
                };
                (d, deviated) = detect_deviation(&current, &nominal, exec.d_th)?;
            }
        }

        let mut replanned = false;
        if policy.is_none() || deviated || t == k {
            let previous = policy.as_ref().map(|p| (p, t));
            let (fresh, converged) = planner.plan(&belief, previous)?;
            if previous.is_some() {
                replans += 1;
            }
            replanned = true;
            plan_warning = !converged;
            if converged {
                consecutive_failures = 0;
            } else {
                planner_warnings += 1;
                consecutive_failures += 1;
                warn!("plan at step {step} did not converge; executing best iterate");
                if consecutive_failures >= exec.max_planner_failures {
                    break ExecutionStatus::PlannerAborted;
                }
            }
            policy = Some(fresh);
            t = 0;
            // The fresh plan starts at the current belief, so d = 0.
            d = 0.0;
        }
        let p = policy.as_ref().expect("policy exists after planning");

        let u = control_action(p, t, &belief.mean)?;
        let (next_true, z) = simulate_step(&x_true, &u, motion, obs, &problem.noise, &mut rng)?;
        let lin = KfLinearization::at(motion, obs, &p.nominal.states[t], &p.nominal.controls[t], &p.nominal.states[t + 1])?;
        let mean = kf_mean_update(&belief.mean, &u, &z, &lin, p.kalman_gain(t + 1))?;
        belief = GaussianBelief {
            mean,
            covariance: p.covariances[t + 1].clone(),
        };
        x_true = next_true;
        records.push(StepRecord {
            step,
            plan_step: t,
            true_state: x_true.clone(),
            estimate: belief.mean.clone(),
            covariance_trace: belief.covariance.trace(),
            control: u,
            observation: z,
            kl_distance: d,
            replanned,
            planner_warning: plan_warning,
        });
        t += 1;
        step += 1;
    };

    let final_goal_probability =
        goal_probability(&belief, &goal_pos, problem.goal_radius, exec.goal_samples, sub_seed(exec.seed, step))?;
    info!("execution finished: {status} after {step} steps, {replans} plans");
    Ok(ExecutionTrace {
        records,
        status,
        seed: exec.seed,
        initial_state,
        replans,
        planner_warnings,
        final_goal_probability,
    })
}
