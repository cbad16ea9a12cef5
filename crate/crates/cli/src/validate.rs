//! Error-propagation report: closed forms against recursive simulation on
//! random linear time-varying systems, plus the Monte-Carlo checks.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlqg_core::error_analysis::{
    linear_kf_belief_jacobians, recursive_belief_errors, recursive_errors, theorem1_cost_error_check,
    trace_identity_check, BeliefComposites, Composites, CostJacobians, ErrorRealization, LtvSystem, MonteCarloEstimate,
    TraceIdentity,
};
use tlqg_core::CostWeights;

use crate::CliError;

pub const LEMMA_TOL: f64 = 1e-10;
pub const BELIEF_TOL: f64 = 1e-8;
pub const MEAN_ZERO_SE: f64 = 4.0;
pub const TRACE_SE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub seed: u64,
    pub systems: usize,
    pub realizations: usize,
    pub samples: usize,
    /// Perturb one tracking gain in the closed forms only. A negative control.
    pub inject_fault: bool,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            systems: 100,
            realizations: 100,
            samples: 100_000,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Largest closed-form residual for the estimation, state, control and
    /// observation errors, in that order.
    pub lemma_residuals: [f64; 4],
    pub belief_residual: f64,
    pub cost_error: MonteCarloEstimate,
    pub trace: TraceIdentity,
}

impl ValidationReport {
    /// Names of the checks that fail their tolerance.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, r) in self.lemma_residuals.iter().enumerate() {
            if !(*r <= LEMMA_TOL) {
                out.push(format!("lemma {} (residual {r:e} > {LEMMA_TOL:e})", i + 1));
            }
        }
        if !(self.belief_residual <= BELIEF_TOL) {
            out.push(format!("lemma 5 (residual {:e} > {BELIEF_TOL:e})", self.belief_residual));
        }
        if !self.cost_error.within(MEAN_ZERO_SE) {
            out.push(format!("theorem 1 (|mean| above {MEAN_ZERO_SE} standard errors)"));
        }
        if !(self.trace.z_score() <= TRACE_SE) {
            out.push(format!("trace identity (z = {:.2} > {TRACE_SE})", self.trace.z_score()));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let names = ["estimation error", "state error", "control error", "observation error"];
        for (i, (name, r)) in names.iter().zip(self.lemma_residuals).enumerate() {
            let verdict = if r <= LEMMA_TOL { "ok" } else { "FAIL" };
            let _ = writeln!(out, "lemma {} ({name}): max residual {r:.3e} [{verdict}]", i + 1);
        }
        let verdict = if self.belief_residual <= BELIEF_TOL { "ok" } else { "FAIL" };
        let _ = writeln!(out, "lemma 5 (belief error): max residual {:.3e} [{verdict}]", self.belief_residual);
        let c = &self.cost_error;
        let verdict = if c.within(MEAN_ZERO_SE) { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "theorem 1 (cost error): mean {:.4e}, standard error {:.4e}, N = {} [{verdict}]",
            c.mean, c.standard_error, c.samples
        );
        let t = &self.trace;
        let verdict = if t.z_score() <= TRACE_SE { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "trace identity: simulated {:.6} +/- {:.6}, predicted {:.6}, z = {:.2} [{verdict}]",
            t.simulated.mean,
            t.simulated.standard_error,
            t.predicted,
            t.z_score()
        );
        out
    }
}

fn faulty(sys: &LtvSystem) -> LtvSystem {
    let mut bad = sys.clone();
    let t = bad.l.len() / 2;
    bad.l[t] *= 1.05;
    bad
}

/// Largest residual of each closed form against the recursion.
pub fn lemma_residuals(opts: &ValidateOptions) -> Result<[f64; 4], CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = [0.0f64; 4];
    let k = 5usize;
    for _ in 0..opts.systems {
        let sys = LtvSystem::random(2, 1, 2, k, &mut rng)?;
        let closed = if opts.inject_fault { faulty(&sys) } else { sys.clone() };
        let c = Composites::new(&closed);
        for _ in 0..opts.realizations {
            let real = ErrorRealization::sample(&sys, &mut rng);
            let seq = recursive_errors(&sys, &real)?;
            for t in -1..k as i64 {
                let i = (t + 1) as usize;
                worst[0] = worst[0].max((c.estimation_error(&real, t)? - &seq.x_check[i]).amax());
                worst[1] = worst[1].max((c.state_error(&real, t)? - &seq.x_tilde[i]).amax());
                if t + 1 < k as i64 {
                    worst[2] = worst[2].max((c.control_error(&real, t)? - &seq.u_tilde[i]).amax());
                }
                if t >= 0 {
                    worst[3] = worst[3].max((c.observation_error(&real, t)? - &seq.z_tilde[i]).amax());
                }
            }
        }
    }
    Ok(worst)
}

fn nominal_controls(k: usize) -> Vec<DVector<f64>> {
    (0..k).map(|t| DVector::from_element(1, 0.3 * t as f64 - 0.2)).collect()
}

/// Largest belief-error residual on scalar systems with horizon 3.
pub fn belief_residual(opts: &ValidateOptions) -> Result<f64, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED);
    let mut worst: f64 = 0.0;
    let systems = (opts.systems / 10).max(1);
    for _ in 0..systems {
        let sys = LtvSystem::random(1, 1, 1, 3, &mut rng)?;
        let closed = if opts.inject_fault { faulty(&sys) } else { sys.clone() };
        let jac = linear_kf_belief_jacobians(&sys, &DVector::from_element(1, 0.5), &nominal_controls(3), 1e-6)?;
        let bc = BeliefComposites::new(&Composites::new(&closed), &jac)?;
        for _ in 0..opts.realizations {
            let real = ErrorRealization::sample(&sys, &mut rng);
            let rec = recursive_belief_errors(&recursive_errors(&sys, &real)?, &jac);
            for (t, expected) in rec.iter().enumerate() {
                worst = worst.max((bc.belief_error(&real, t)? - expected).amax());
            }
        }
    }
    Ok(worst)
}

/// Monte-Carlo mean of the linearized cost error on a scalar system.
pub fn cost_error(opts: &ValidateOptions) -> Result<MonteCarloEstimate, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC057);
    let k = 5;
    let sys = LtvSystem::random(1, 1, 1, k, &mut rng)?;
    let jac = linear_kf_belief_jacobians(&sys, &DVector::zeros(1), &nominal_controls(k), 1e-6)?;
    let costs = CostJacobians {
        cb: (0..=k).map(|_| DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0))).collect(),
        cu: (0..k).map(|_| DMatrix::from_fn(1, 1, |_, _| rng.random_range(-1.0..1.0))).collect(),
    };
    Ok(theorem1_cost_error_check(&sys, &jac, &costs, opts.samples, opts.seed)?)
}

/// Simulated quadratic estimation cost against the covariance trace on a
/// planar system.
pub fn trace_identity(opts: &ValidateOptions) -> Result<TraceIdentity, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7ACE);
    let k = 5;
    let sys = LtvSystem::random(2, 1, 2, k, &mut rng)?;
    let w = CostWeights::uniform(k, DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), DMatrix::identity(1, 1))?;
    Ok(trace_identity_check(&sys, &w, opts.samples, opts.seed)?)
}

pub fn run(opts: &ValidateOptions) -> Result<ValidationReport, CliError> {
    if opts.systems == 0 || opts.realizations == 0 || opts.samples < 2 {
        return Err(CliError::Parse("validate needs at least one system, one realization and two samples".into()));
    }
    Ok(ValidationReport {
        lemma_residuals: lemma_residuals(opts)?,
        belief_residual: belief_residual(opts)?,
        cost_error: cost_error(opts)?,
        trace: trace_identity(opts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(inject_fault: bool) -> ValidateOptions {
        ValidateOptions {
            systems: 10,
            realizations: 10,
            samples: 2_000,
            inject_fault,
            ..ValidateOptions::default()
        }
    }

    #[test]
    fn clean_run_passes() {
        let report = run(&quick(false)).unwrap();
        assert!(report.failures().is_empty(), "{}", report.render());
    }

    #[test]
    fn perturbed_gain_breaks_the_state_error() {
        let report = run(&quick(true)).unwrap();
        let failures = report.failures();
        assert!(report.lemma_residuals[0] <= LEMMA_TOL);
        assert!(failures.iter().any(|f| f.starts_with("lemma 2")), "{failures:?}");
    }
}
