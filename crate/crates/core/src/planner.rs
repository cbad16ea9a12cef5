//! Deterministic trajectory optimization over nominal control sequences.
//!
//! The objective sums the nominal estimation cost `tr(W_t P⁺_t W_tᵀ)`, the
//! control effort and an optional obstacle line-integral cost. The terminal
//! goal ball and the control-norm bound are enforced with a quadratic
//! penalty, minimized by BFGS with a backtracking line search.

use std::sync::Arc;

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};

use crate::belief::{riccati_step, CostWeights, RiccatiStep};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{MotionModel, NoiseSpec, ObservationModel};
use crate::obstacles::ObstacleSet;

/// Nominal state sequence `x_{0:K}` and control sequence `u_{0:K−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Largest `‖x_{t+1} − f(x_t, u_t, 0)‖∞` along the trajectory.
    pub fn consistency_error(&self, motion: &dyn MotionModel) -> f64 {
        self.controls
            .iter()
            .enumerate()
            .map(|(t, u)| (motion.step(&self.states[t], u) - &self.states[t + 1]).amax())
            .fold(0.0, f64::max)
    }
}

/// Noiseless rollout from `x0`.
pub fn propagate_nominal(x0: &DVector<f64>, controls: &[DVector<f64>], motion: &dyn MotionModel) -> Result<NominalTrajectory> {
    linalg::check_len("propagate_nominal x0", x0, motion.state_dim())?;
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (t, u) in controls.iter().enumerate() {
        linalg::check_len("propagate_nominal control", u, motion.control_dim())?;
        let next = motion.step(&states[t], u);
        if !linalg::all_finite(&next) {
            return Err(Error::Rollout { index: t + 1 });
        }
        states.push(next);
    }
    Ok(NominalTrajectory {
        states,
        controls: controls.to_vec(),
    })
}

/// Everything needed to state the planning problem.
#[derive(Debug, Clone)]
pub struct PlanningProblem {
    pub motion: Arc<dyn MotionModel>,
    pub obs: Arc<dyn ObservationModel>,
    pub noise: NoiseSpec,
    pub x0_mean: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub weights: CostWeights,
    pub goal: DVector<f64>,
    /// Terminal ball radius; `f64::INFINITY` disables the terminal constraint.
    pub goal_radius: f64,
    /// Control-norm bound; `f64::INFINITY` disables it.
    pub control_radius: f64,
    pub horizon: usize,
    pub obstacles: Option<ObstacleSet>,
    pub obstacle_weight: f64,
}

impl PlanningProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.motion.state_dim();
        let nu = self.motion.control_dim();
        if self.horizon == 0 {
            return Err(Error::Config("planning horizon must be at least 1".into()));
        }
        if !(self.goal_radius > 0.0) || !(self.control_radius > 0.0) {
            return Err(Error::Config("goal and control radii must be positive".into()));
        }
        if !(self.obstacle_weight >= 0.0) {
            return Err(Error::Config("obstacle weight must be non-negative".into()));
        }
        linalg::check_len("initial mean", &self.x0_mean, n)?;
        linalg::check_square("initial covariance", &self.p0, n)?;
        linalg::check_len("goal", &self.goal, n)?;
        if self.weights.horizon() != self.horizon {
            return Err(Error::dim("weights horizon", self.horizon, self.weights.horizon()));
        }
        for t in 1..=self.horizon {
            linalg::check_square("W^x", self.weights.wx(t), n)?;
            linalg::check_square("W^u", self.weights.wu(t), nu)?;
        }
        self.noise.check_against(self.motion.as_ref(), self.obs.as_ref())?;
        if let Some(obstacles) = &self.obstacles {
            if obstacles.dim() > n {
                return Err(Error::dim("obstacle dimension", format!("at most {n}"), obstacles.dim()));
            }
        }
        Ok(())
    }

    fn obstacle_term(&self, from: &DVector<f64>, to: &DVector<f64>) -> f64 {
        match &self.obstacles {
            Some(set) if !set.is_empty() && self.obstacle_weight > 0.0 => {
                let d = set.dim();
                self.obstacle_weight * set.obstacle_cost(&from.rows(0, d).into_owned(), &to.rows(0, d).into_owned())
            }
            _ => 0.0,
        }
    }

    fn check_controls(&self, controls: &[DVector<f64>]) -> Result<()> {
        if controls.len() != self.horizon {
            return Err(Error::dim("control sequence length", self.horizon, controls.len()));
        }
        for u in controls {
            linalg::check_len("control", u, self.motion.control_dim())?;
        }
        Ok(())
    }
}

/// Objective split into its three parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub estimation: f64,
    pub control: f64,
    pub obstacle: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.estimation + self.control + self.obstacle
    }

    fn add(&mut self, other: &CostBreakdown) {
        self.estimation += other.estimation;
        self.control += other.control;
        self.obstacle += other.obstacle;
    }
}

/// State, covariance and cost at stage `t` given stage `t − 1`.
struct Stage {
    x: DVector<f64>,
    p_plus: DMatrix<f64>,
    cost: CostBreakdown,
    step: RiccatiStep,
}

fn stage(problem: &PlanningProblem, t: usize, x_prev: &DVector<f64>, u_prev: &DVector<f64>, p_prev: &DMatrix<f64>) -> Result<Stage> {
    let motion = problem.motion.as_ref();
    let x = motion.step(x_prev, u_prev);
    if !linalg::all_finite(&x) {
        return Err(Error::Rollout { index: t });
    }
    let (a, _, g) = motion.jacobians(x_prev, u_prev);
    let (h, m) = problem.obs.jacobians(&x).map_err(|e| e.at_step(t))?;
    let step = riccati_step(p_prev, &a, &g, &h, &m, &problem.noise).map_err(|e| e.at_step(t))?;
    let cost = CostBreakdown {
        estimation: problem.weights.state_cost(t, &step.p_plus),
        control: (u_prev.transpose() * problem.weights.wu(t) * u_prev)[(0, 0)],
        obstacle: problem.obstacle_term(x_prev, &x),
    };
    Ok(Stage {
        p_plus: step.p_plus.clone(),
        x,
        cost,
        step,
    })
}

/// Full rollout with per-stage prefix sums, reused by the gradient.
struct Evaluation {
    states: Vec<DVector<f64>>,
    p_plus: Vec<DMatrix<f64>>,
    /// `prefix[t]` is the cost of stages `1..=t`.
    prefix: Vec<f64>,
    breakdown: CostBreakdown,
    steps: Vec<RiccatiStep>,
}

fn evaluate(problem: &PlanningProblem, controls: &[DVector<f64>]) -> Result<Evaluation> {
    let k = problem.horizon;
    let mut states = Vec::with_capacity(k + 1);
    let mut p_plus = Vec::with_capacity(k + 1);
    let mut prefix = Vec::with_capacity(k + 1);
    let mut steps = Vec::with_capacity(k);
    let mut breakdown = CostBreakdown::default();
    states.push(problem.x0_mean.clone());
    p_plus.push(problem.p0.clone());
    prefix.push(0.0);
    for t in 1..=k {
        let st = stage(problem, t, &states[t - 1], &controls[t - 1], &p_plus[t - 1])?;
        breakdown.add(&st.cost);
        prefix.push(prefix[t - 1] + st.cost.total());
        states.push(st.x);
        p_plus.push(st.p_plus);
        steps.push(st.step);
    }
    Ok(Evaluation {
        states,
        p_plus,
        prefix,
        breakdown,
        steps,
    })
}

/// Objective value of a control sequence. Pure: equal inputs give bitwise
/// equal outputs.
pub fn plan_cost(problem: &PlanningProblem, controls: &[DVector<f64>]) -> Result<f64> {
    problem.check_controls(controls)?;
    Ok(evaluate(problem, controls)?.prefix[problem.horizon])
}

/// Per-part objective and nominal covariance steps along the rollout.
#[derive(Debug, Clone)]
pub struct PlanEvaluation {
    pub trajectory: NominalTrajectory,
    pub steps: Vec<RiccatiStep>,
    pub breakdown: CostBreakdown,
}

pub fn evaluate_plan(problem: &PlanningProblem, controls: &[DVector<f64>]) -> Result<PlanEvaluation> {
    problem.check_controls(controls)?;
    let ev = evaluate(problem, controls)?;
    Ok(PlanEvaluation {
        trajectory: NominalTrajectory {
            states: ev.states,
            controls: controls.to_vec(),
        },
        steps: ev.steps,
        breakdown: ev.breakdown,
    })
}

pub fn cost_breakdown(problem: &PlanningProblem, controls: &[DVector<f64>]) -> Result<CostBreakdown> {
    Ok(evaluate_plan(problem, controls)?.breakdown)
}

/// Cost of the sequence with stage `j + 1` onward recomputed after control
/// `j` is replaced by `u_j`.
fn suffix_cost(problem: &PlanningProblem, base: &Evaluation, controls: &[DVector<f64>], j: usize, u_j: &DVector<f64>) -> Result<f64> {
    let k = problem.horizon;
    let mut total = base.prefix[j];
    let mut st = stage(problem, j + 1, &base.states[j], u_j, &base.p_plus[j])?;
    total += st.cost.total();
    for t in (j + 2)..=k {
        st = stage(problem, t, &st.x, &controls[t - 1], &st.p_plus)?;
        total += st.cost.total();
    }
    Ok(total)
}

fn fd_gradient(problem: &PlanningProblem, controls: &[DVector<f64>], base: &Evaluation, step: f64) -> Result<DVector<f64>> {
    let nu = problem.motion.control_dim();
    let mut grad = DVector::zeros(problem.horizon * nu);
    for j in 0..problem.horizon {
        for i in 0..nu {
            let coordinate = j * nu + i;
            let h = step * (1.0 + controls[j][i].abs());
            let mut probe = controls[j].clone();
            probe[i] = controls[j][i] + h;
            let plus = suffix_cost(problem, base, controls, j, &probe).map_err(|_| Error::Gradient { coordinate })?;
            probe[i] = controls[j][i] - h;
            let minus = suffix_cost(problem, base, controls, j, &probe).map_err(|_| Error::Gradient { coordinate })?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Gradient { coordinate });
            }
            grad[coordinate] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Central finite-difference gradient of [`plan_cost`], flattened as
/// `(u_0, u_1, …)`. The per-coordinate step is `step · (1 + |u_i|)`.
pub fn cost_gradient(problem: &PlanningProblem, controls: &[DVector<f64>], step: f64) -> Result<DVector<f64>> {
    problem.check_controls(controls)?;
    if !(step > 0.0) {
        return Err(Error::Config(format!("gradient step must be positive, got {step}")));
    }
    let base = evaluate(problem, controls)?;
    fd_gradient(problem, controls, &base, step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Inner quasi-Newton iterations per penalty round.
    pub max_iterations: usize,
    /// Relative finite-difference step.
    pub gradient_step: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub outer_rounds: usize,
    /// Inner loop stops when `‖∇‖∞ ≤ tol · max(1, |merit|)`.
    pub convergence_tol: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Fraction of the goal radius and control bound kept as slack so the
    /// returned plan satisfies both strictly.
    pub constraint_margin: f64,
    /// Cap on `‖Δu‖∞` per line-search trial.
    pub max_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_step: 1e-6,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            outer_rounds: 6,
            convergence_tol: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            constraint_margin: 0.01,
            max_step: f64::INFINITY,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gradient_step", self.gradient_step),
            ("penalty_initial", self.penalty_initial),
            ("convergence_tol", self.convergence_tol),
            ("armijo", self.armijo),
            ("backtrack", self.backtrack),
            ("max_step", self.max_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("solver option {name} must be positive, got {v}")));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::Config("penalty_growth must exceed 1".into()));
        }
        if !(self.backtrack < 1.0 && self.armijo < 1.0) {
            return Err(Error::Config("armijo and backtrack must be below 1".into()));
        }
        if !(0.0..1.0).contains(&self.constraint_margin) {
            return Err(Error::Config("constraint_margin must lie in [0, 1)".into()));
        }
        if self.max_iterations == 0 || self.outer_rounds == 0 || self.max_backtracks == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: NominalTrajectory,
    pub cost: f64,
    /// Largest residual of the terminal-ball and control-norm constraints.
    pub constraint_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best merit so far after each penalty round, at the final penalty weight.
    pub merit_history: Vec<f64>,
    pub penalty: f64,
}

impl PlanResult {
    pub fn terminal_residual(&self, goal: &DVector<f64>) -> f64 {
        (self.trajectory.terminal() - goal).norm()
    }
}

/// Residual of the terminal ball `‖x_K − x_g‖ < r_g` and control bounds.
pub fn constraint_violation(problem: &PlanningProblem, traj: &NominalTrajectory) -> f64 {
    let terminal = if problem.goal_radius.is_finite() {
        ((traj.terminal() - &problem.goal).norm() - problem.goal_radius).max(0.0)
    } else {
        0.0
    };
    let control = if problem.control_radius.is_finite() {
        traj.controls
            .iter()
            .map(|u| (u.norm() - problem.control_radius).max(0.0))
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    terminal.max(control)
}

fn flatten(controls: &[DVector<f64>]) -> DVector<f64> {
    let mut v = Vec::with_capacity(controls.iter().map(|u| u.len()).sum());
    for u in controls {
        v.extend(u.iter().copied());
    }
    DVector::from_vec(v)
}

fn unflatten(v: &DVector<f64>, nu: usize) -> Vec<DVector<f64>> {
    v.as_slice().chunks(nu).map(DVector::from_column_slice).collect()
}

struct Penalized<'a> {
    problem: &'a PlanningProblem,
    mu: f64,
    r_goal: f64,
    r_control: f64,
}

struct MeritPoint {
    x: DVector<f64>,
    merit: f64,
    eval: Evaluation,
}

impl Penalized<'_> {
    fn penalty(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        let mut p = 0.0;
        if self.r_goal.is_finite() {
            let excess = ((states[self.problem.horizon].clone() - &self.problem.goal).norm() - self.r_goal).max(0.0);
            p += excess * excess;
        }
        if self.r_control.is_finite() {
            for u in controls {
                let excess = (u.norm() - self.r_control).max(0.0);
                p += excess * excess;
            }
        }
        self.mu * p
    }

    fn point(&self, x: DVector<f64>) -> Option<MeritPoint> {
        let controls = unflatten(&x, self.problem.motion.control_dim());
        let eval = evaluate(self.problem, &controls).ok()?;
        let merit = eval.prefix[self.problem.horizon] + self.penalty(&eval.states, &controls);
        merit.is_finite().then_some(MeritPoint { x, merit, eval })
    }

    fn gradient(&self, pt: &MeritPoint, step: f64) -> Result<DVector<f64>> {
        let problem = self.problem;
        let nu = problem.motion.control_dim();
        let k = problem.horizon;
        let controls = unflatten(&pt.x, nu);
        let mut grad = fd_gradient(problem, &controls, &pt.eval, step)?;

        if self.r_control.is_finite() {
            for (j, u) in controls.iter().enumerate() {
                let norm = u.norm();
                if norm > self.r_control {
                    let coef = 2.0 * self.mu * (norm - self.r_control) / norm;
                    for i in 0..nu {
                        grad[j * nu + i] += coef * u[i];
                    }
                }
            }
        }
        if self.r_goal.is_finite() {
            let e = &pt.eval.states[k] - &problem.goal;
            let norm = e.norm();
            if norm > self.r_goal {
                let coef = 2.0 * self.mu * (norm - self.r_goal) / norm;
                // Adjoint sweep: λᵀ = eᵀ ∂x_K/∂x_{j+1}.
                let mut lambda = e.transpose() * coef;
                for j in (0..k).rev() {
                    let (a, b, _) = problem.motion.jacobians(&pt.eval.states[j], &controls[j]);
                    let gj = &lambda * b;
                    for i in 0..nu {
                        grad[j * nu + i] += gj[i];
                    }
                    lambda = lambda * a;
                }
            }
        }
        Ok(grad)
    }
}

/// Inner BFGS loop on the penalized merit. Returns the final point, the
/// number of iterations and whether the iteration cap was hit.
fn bfgs(pen: &Penalized<'_>, start: MeritPoint, options: &SolverOptions) -> (MeritPoint, usize, bool) {
    let n = start.x.len();
    let mut current = start;
    let Ok(mut grad) = pen.gradient(&current, options.gradient_step) else {
        return (current, 0, false);
    };
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        let gnorm = grad.amax();
        if gnorm <= options.convergence_tol * current.merit.abs().max(1.0) {
            return (current, iterations, false);
        }
        let mut direction = -(&h_inv * &grad);
        let mut slope = grad.dot(&direction);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            direction = -grad.clone();
            slope = grad.dot(&direction);
        }
        let longest = direction.amax();
        let mut alpha = if longest > options.max_step { options.max_step / longest } else { 1.0 };

        let mut accepted = None;
        for _ in 0..options.max_backtracks {
            let trial = &current.x + &direction * alpha;
            if let Some(pt) = pen.point(trial) {
                if pt.merit <= current.merit + options.armijo * alpha * slope {
                    accepted = Some(pt);
                    break;
                }
            }
            alpha *= options.backtrack;
        }
        let Some(next) = accepted else {
            if fresh {
                trace!("line search stalled at merit {:.6e}", current.merit);
                return (current, iterations, false);
            }
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        iterations += 1;
        let Ok(next_grad) = pen.gradient(&next, options.gradient_step) else {
            return (next, iterations, false);
        };
        let s = &next.x - &current.x;
        let y = &next_grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        current = next;
        grad = next_grad;
    }
    (current, iterations, true)
}

/// Minimizes [`plan_cost`] subject to the terminal ball and control bounds
/// with a quadratic-penalty outer loop.
pub fn solve(problem: &PlanningProblem, seed_controls: &[DVector<f64>], options: &SolverOptions) -> Result<PlanResult> {
    problem.validate()?;
    options.validate()?;
    problem.check_controls(seed_controls)?;
    let seed_cost = plan_cost(problem, seed_controls).map_err(|e| Error::Input(format!("seed is infeasible: {e}")))?;
    if !seed_cost.is_finite() {
        return Err(Error::Input("seed has a non-finite cost".into()));
    }

    let nu = problem.motion.control_dim();
    let shrink = 1.0 - options.constraint_margin;
    let mut pen = Penalized {
        problem,
        mu: options.penalty_initial,
        r_goal: problem.goal_radius * shrink,
        r_control: problem.control_radius * shrink,
    };
    let mut current = pen
        .point(flatten(seed_controls))
        .ok_or_else(|| Error::Input("seed merit is not finite".into()))?;
    let mut round_ends: Vec<DVector<f64>> = Vec::with_capacity(options.outer_rounds);
    let mut total_iterations = 0;
    let mut capped = false;

    for round in 0..options.outer_rounds {
        let (end, iterations, hit_cap) = bfgs(&pen, current, options);
        total_iterations += iterations;
        capped = hit_cap;
        let controls = unflatten(&end.x, nu);
        let traj = NominalTrajectory {
            states: end.eval.states.clone(),
            controls,
        };
        let violation = constraint_violation(problem, &traj);
        debug!(
            "penalty round {round}: mu={:.1e} merit={:.6e} violation={violation:.3e} iterations={iterations}",
            pen.mu, end.merit
        );
        round_ends.push(end.x.clone());
        current = end;
        if violation == 0.0 && !hit_cap {
            break;
        }
        if round + 1 < options.outer_rounds {
            pen.mu *= options.penalty_growth;
            current = pen.point(current.x).expect("merit finite at accepted iterate");
        }
    }

    // Re-score every round end at the final penalty weight and keep the best.
    let mut merit_history = Vec::with_capacity(round_ends.len());
    let mut best: Option<MeritPoint> = None;
    for x in round_ends {
        let pt = pen.point(x).expect("merit finite at accepted iterate");
        if best.as_ref().is_none_or(|b| pt.merit < b.merit) {
            best = Some(pt);
        }
        merit_history.push(best.as_ref().map_or(f64::INFINITY, |b| b.merit));
    }
    let best = best.expect("at least one penalty round");
    let controls = unflatten(&best.x, nu);
    let trajectory = NominalTrajectory {
        states: best.eval.states,
        controls,
    };
    let violation = constraint_violation(problem, &trajectory);
    Ok(PlanResult {
        cost: best.eval.prefix[problem.horizon],
        converged: violation <= 1e-4 && !capped,
        constraint_violation: violation,
        iterations: total_iterations,
        merit_history,
        penalty: pen.mu,
        trajectory,
    })
}

/// Solves from several seeds and keeps the best result: converged results
/// win over non-converged ones, then lower cost wins.
pub fn solve_multi(problem: &PlanningProblem, seeds: &[Vec<DVector<f64>>], options: &SolverOptions) -> Result<PlanResult> {
    let mut best: Option<PlanResult> = None;
    let mut last_err = None;
    for seed in seeds {
        match solve(problem, seed, options) {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some(b) => (r.converged, -r.cost) > (b.converged, -b.cost),
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Input("no seeds supplied".into())))
}

/// Controls that track the given waypoints by least-squares inversion of
/// the noiseless model linearized in `u`, clipped to the control bound.
pub fn tracking_seed(problem: &PlanningProblem, waypoints: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if waypoints.len() != problem.horizon + 1 {
        return Err(Error::dim("tracking waypoints", problem.horizon + 1, waypoints.len()));
    }
    let motion = problem.motion.as_ref();
    let nu = motion.control_dim();
    let zero = DVector::zeros(nu);
    let mut x = problem.x0_mean.clone();
    let mut controls = Vec::with_capacity(problem.horizon);
    for target in &waypoints[1..] {
        let (_, b, _) = motion.jacobians(&x, &zero);
        let drift = motion.step(&x, &zero);
        let mut u = linalg::pseudo_inverse(&b) * (target - drift);
        let norm = u.norm();
        if problem.control_radius.is_finite() && norm > problem.control_radius {
            u *= problem.control_radius / norm;
        }
        x = motion.step(&x, &u);
        controls.push(u);
    }
    Ok(controls)
}

/// Equally spaced waypoints from the initial mean to the goal.
pub fn straight_line_seed(problem: &PlanningProblem) -> Result<Vec<DVector<f64>>> {
    let k = problem.horizon;
    let waypoints: Vec<DVector<f64>> = (0..=k)
        .map(|t| &problem.x0_mean + (&problem.goal - &problem.x0_mean) * (t as f64 / k as f64))
        .collect();
    tracking_seed(problem, &waypoints)
}

/// Polyline through intermediate via points, sampled uniformly in arc
/// length. Via points may give only the leading position coordinates; the
/// remaining coordinates are interpolated from start to goal.
pub fn polyline_seed(problem: &PlanningProblem, via: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let n = problem.motion.state_dim();
    let k = problem.horizon;
    let start = &problem.x0_mean;
    let goal = &problem.goal;
    let pos = via.first().map_or(n, |v| v.len());
    if via.iter().any(|v| v.len() != pos || pos > n || pos == 0) {
        return Err(Error::Input("via points must share a dimension no larger than the state".into()));
    }
    let mut nodes: Vec<DVector<f64>> = vec![start.rows(0, pos).into_owned()];
    nodes.extend(via.iter().cloned());
    nodes.push(goal.rows(0, pos).into_owned());
    let lengths: Vec<f64> = nodes.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
    let total: f64 = lengths.iter().sum();

    let point_at = |s: f64| -> DVector<f64> {
        let mut remaining = s * total;
        for (i, len) in lengths.iter().enumerate() {
            if remaining <= *len || i + 1 == lengths.len() {
                let f = if *len > 0.0 { (remaining / len).clamp(0.0, 1.0) } else { 1.0 };
                return &nodes[i] + (&nodes[i + 1] - &nodes[i]) * f;
            }
            remaining -= len;
        }
        nodes[nodes.len() - 1].clone()
    };
    let waypoints: Vec<DVector<f64>> = (0..=k)
        .map(|t| {
            let s = t as f64 / k as f64;
            let mut w = start + (goal - start) * s;
            if total > 0.0 {
                w.rows_mut(0, pos).copy_from(&point_at(s));
            }
            w
        })
        .collect();
    tracking_seed(problem, &waypoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearMotion, LinearObservation};
    use approx::assert_relative_eq;

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn scalar_problem(k: usize, wx: f64, wu: f64, goal: f64, r_g: f64) -> PlanningProblem {
        PlanningProblem {
            motion: Arc::new(LinearMotion::new(s(1.0), s(1.0), s(1.0)).unwrap()),
            obs: Arc::new(LinearObservation::new(s(1.0), s(1.0)).unwrap()),
            noise: NoiseSpec::new(s(1.0), s(1.0)).unwrap(),
            x0_mean: DVector::zeros(1),
            p0: s(1.0),
            weights: CostWeights::uniform(k, s(wx), s(wu)).unwrap(),
            goal: DVector::from_element(1, goal),
            goal_radius: r_g,
            control_radius: 10.0,
            horizon: k,
            obstacles: None,
            obstacle_weight: 1.0,
        }
    }

    fn controls(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    #[test]
    fn rollout_examples() {
        let m = LinearMotion::new(s(1.0), s(1.0), s(1.0)).unwrap();
        let traj = propagate_nominal(&DVector::zeros(1), &controls(&[2.0]), &m).unwrap();
        assert_eq!(traj.states, controls(&[0.0, 2.0]));
        let blow = LinearMotion::new(s(1e300), s(1.0), s(1.0)).unwrap();
        let err = propagate_nominal(&DVector::from_element(1, 1e10), &controls(&[0.0, 0.0]), &blow).unwrap_err();
        assert_eq!(err, Error::Rollout { index: 1 });
    }

    #[test]
    fn cost_examples() {
        let p = scalar_problem(1, 1.0, 0.0, 0.0, f64::INFINITY);
        assert_relative_eq!(plan_cost(&p, &controls(&[0.0])).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        let p = scalar_problem(3, 0.0, 1.0, 0.0, f64::INFINITY);
        assert_relative_eq!(plan_cost(&p, &controls(&[1.0, -2.0, 0.5])).unwrap(), 5.25, epsilon = 1e-15);
        let g = cost_gradient(&p, &controls(&[1.0, -2.0, 0.5]), 1e-6).unwrap();
        assert_relative_eq!(g, DVector::from_vec(vec![2.0, -4.0, 1.0]), epsilon = 1e-6);
    }

    #[test]
    fn one_dimensional_reach() {
        let p = scalar_problem(2, 0.0, 1.0, 2.0, 0.1);
        let seed = controls(&[0.0, 0.0]);
        let r = solve(&p, &seed, &SolverOptions::default()).unwrap();
        assert!(r.converged);
        let u = &r.trajectory.controls;
        assert_relative_eq!(u[0][0], u[1][0], epsilon = 1e-4);
        assert!(u[0][0] > 0.94 && u[0][0] < 0.96, "{}", u[0][0]);
        assert!(r.terminal_residual(&p.goal) < 0.1);
        assert!(r.merit_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn goal_at_start_keeps_zero_controls() {
        let p = scalar_problem(3, 0.0, 1.0, 0.0, 0.1);
        let r = solve(&p, &controls(&[0.0, 0.0, 0.0]), &SolverOptions::default()).unwrap();
        assert!(r.cost.abs() < 1e-8);
        assert!(r.converged);
    }

    #[test]
    fn straight_line_reaches_goal() {
        let p = scalar_problem(4, 0.0, 1.0, 3.0, 0.1);
        let seed = straight_line_seed(&p).unwrap();
        let traj = propagate_nominal(&p.x0_mean, &seed, p.motion.as_ref()).unwrap();
        assert_relative_eq!(traj.terminal()[0], 3.0, epsilon = 1e-12);
        let mut clipped = p.clone();
        clipped.control_radius = 0.5;
        for u in straight_line_seed(&clipped).unwrap() {
            assert!(u.norm() <= 0.5 + 1e-15);
        }
    }
}
