//! Scenario documents: a JSON tree describing the robot, its sensors, the
//! environment and the planning and execution settings.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tlqg_core::models::{make_observation_model, LightDarkParams, LinearMotion, LinearObservation, MecanumGeometry, YoubotBase};
use tlqg_core::obstacles::{inflate_polygon, mvee, BarrierParams, MVEE_DEFAULT_TOLERANCE};
use tlqg_core::{
    CostWeights, Ellipsoid, ExecutionConfig, LandmarkMap, MotionModel, NoiseSpec, ObservationKind, ObservationModel,
    ObstacleSet, PlanningProblem, SolverOptions,
};

use crate::CliError;

/// A matrix given as `s` (meaning `s·I`), a diagonal list, or full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize, field: &str) -> Result<DMatrix<f64>, CliError> {
        match self {
            MatrixSpec::Scalar(s) => Ok(DMatrix::identity(n, n) * *s),
            MatrixSpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(CliError::Schema(format!("{field}: expected {n} diagonal entries, got {}", d.len())));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
            MatrixSpec::Full(rows) => full_matrix(rows, n, n, field),
        }
    }
}

fn full_matrix(rows: &[Vec<f64>], nr: usize, nc: usize, field: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::Schema(format!("{field}: expected a {nr}x{nc} matrix")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn rect_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, CliError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(CliError::Schema(format!("{field}: matrix must not be empty")));
    }
    full_matrix(rows, nr, nc, field)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionSpec {
    Youbot {
        #[serde(default = "one")]
        dt: f64,
        wheel_radius: Option<f64>,
        half_length: Option<f64>,
        half_width: Option<f64>,
    },
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightDarkSpec {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub center: f64,
    pub low_noise_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    /// One of the shipped kinds, or `linear`.
    pub kind: String,
    pub light_dark: Option<LightDarkSpec>,
    pub h: Option<Vec<Vec<f64>>>,
    pub m: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_omega: MatrixSpec,
    pub sigma_nu: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBelief {
    pub mean: Vec<f64>,
    pub covariance: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub state: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub w_x: MatrixSpec,
    pub w_u: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub q: Option<u32>,
    pub m: Option<u32>,
    pub riemann_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    /// Polygon vertex lists in the plane.
    pub polygons: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub inflation: f64,
    #[serde(default = "one")]
    pub weight: f64,
    pub barrier: Option<BarrierSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub max_iterations: Option<usize>,
    pub gradient_step: Option<f64>,
    pub penalty_initial: Option<f64>,
    pub penalty_growth: Option<f64>,
    pub outer_rounds: Option<usize>,
    pub convergence_tol: Option<f64>,
    pub armijo: Option<f64>,
    pub backtrack: Option<f64>,
    pub max_backtracks: Option<usize>,
    pub constraint_margin: Option<f64>,
    pub max_step: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionSpec {
    pub d_th: Option<f64>,
    pub p_g: Option<f64>,
    pub step_budget: Option<usize>,
    pub goal_samples: Option<usize>,
    pub max_planner_failures: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub motion: MotionSpec,
    pub observation: ObservationSpec,
    #[serde(default)]
    pub landmarks: Vec<[f64; 2]>,
    pub noise: NoiseSection,
    pub initial: InitialBelief,
    pub goal: GoalSpec,
    pub horizon: usize,
    pub weights: WeightSpec,
    /// Bound on `‖u_t‖`; omitted means unbounded.
    pub control_radius: Option<f64>,
    pub obstacles: Option<ObstacleSpec>,
    /// Waypoints for an extra polyline seed of the first plan.
    #[serde(default)]
    pub via: Vec<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub execution: ExecutionSpec,
    #[serde(default)]
    pub seed: u64,
}

/// Everything a command needs, resolved from a scenario.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub name: String,
    pub problem: PlanningProblem,
    pub options: SolverOptions,
    pub execution: ExecutionConfig,
    pub via: Vec<DVector<f64>>,
    pub landmarks: Vec<[f64; 2]>,
    pub light_dark: Option<LightDarkParams>,
}

impl Scenario {
    /// Reads and schema-checks a scenario file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Schema(msg) => CliError::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        // serde_json reports the offending field together with line and column.
        serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let motion = self.motion_model()?;
        let n = motion.state_dim();
        let nu = motion.control_dim();
        let (obs, light_dark) = self.observation_model(n)?;

        let noise = NoiseSpec::new(
            self.noise.sigma_omega.to_matrix(motion.noise_dim(), "noise.sigma_omega")?,
            self.noise.sigma_nu.to_matrix(obs.noise_dim(), "noise.sigma_nu")?,
        )?;
        let x0 = vector(&self.initial.mean, n, "initial.mean")?;
        let p0 = self.initial.covariance.to_matrix(n, "initial.covariance")?;
        let goal = vector(&self.goal.state, n, "goal.state")?;
        if self.horizon == 0 {
            return Err(CliError::Schema("horizon: must be at least 1".into()));
        }
        let weights = CostWeights::uniform(
            self.horizon,
            self.weights.w_x.to_matrix(n, "weights.w_x")?,
            self.weights.w_u.to_matrix(nu, "weights.w_u")?,
        )?;

        let (obstacles, obstacle_weight) = match &self.obstacles {
            Some(spec) => (Some(obstacle_set(spec)?), spec.weight),
            None => (None, 0.0),
        };

        let problem = PlanningProblem {
            motion,
            obs,
            noise,
            x0_mean: x0,
            p0,
            weights,
            goal,
            goal_radius: self.goal.radius,
            control_radius: self.control_radius.unwrap_or(f64::INFINITY),
            horizon: self.horizon,
            obstacles,
            obstacle_weight,
        };
        problem.validate()?;

        let options = solver_options(&self.solver);
        options.validate()?;

        let defaults = ExecutionConfig::for_horizon(self.horizon);
        let execution = ExecutionConfig {
            d_th: self.execution.d_th.unwrap_or(defaults.d_th),
            p_g: self.execution.p_g.unwrap_or(defaults.p_g),
            step_budget: self.execution.step_budget.unwrap_or(defaults.step_budget),
            seed: self.seed,
            goal_samples: self.execution.goal_samples.unwrap_or(defaults.goal_samples),
            max_planner_failures: self.execution.max_planner_failures.unwrap_or(defaults.max_planner_failures),
        };
        execution.validate()?;

        let via = self
            .via
            .iter()
            .map(|p| {
                if p.is_empty() || p.len() > n {
                    Err(CliError::Schema(format!("via: points need 1 to {n} coordinates")))
                } else {
                    Ok(DVector::from_column_slice(p))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Resolved {
            name: self.name.clone(),
            problem,
            options,
            execution,
            via,
            landmarks: self.landmarks.clone(),
            light_dark,
        })
    }

    fn motion_model(&self) -> Result<Arc<dyn MotionModel>, CliError> {
        Ok(match &self.motion {
            MotionSpec::Youbot {
                dt,
                wheel_radius,
                half_length,
                half_width,
            } => {
                let d = MecanumGeometry::default();
                let geometry = MecanumGeometry {
                    wheel_radius: wheel_radius.unwrap_or(d.wheel_radius),
                    half_length: half_length.unwrap_or(d.half_length),
                    half_width: half_width.unwrap_or(d.half_width),
                };
                Arc::new(YoubotBase::new(geometry, *dt)?)
            }
            MotionSpec::Linear { a, b, g } => Arc::new(LinearMotion::new(
                rect_matrix(a, "motion.a")?,
                rect_matrix(b, "motion.b")?,
                rect_matrix(g, "motion.g")?,
            )?),
        })
    }

    fn observation_model(&self, n: usize) -> Result<(Arc<dyn ObservationModel>, Option<LightDarkParams>), CliError> {
        let spec = &self.observation;
        if spec.kind == "linear" {
            let (Some(h), Some(m)) = (&spec.h, &spec.m) else {
                return Err(CliError::Schema("observation: kind `linear` needs `h` and `m`".into()));
            };
            let h = rect_matrix(h, "observation.h")?;
            if h.ncols() != n {
                return Err(CliError::Schema(format!("observation.h: expected {n} columns")));
            }
            return Ok((Arc::new(LinearObservation::new(h, rect_matrix(m, "observation.m")?)?), None));
        }
        let kind: ObservationKind = spec.kind.parse()?;
        let light_dark = spec.light_dark.as_ref().map(|p| LightDarkParams {
            a: p.a,
            b: p.b,
            c: p.c,
            center: p.center,
            low_noise_x: p.low_noise_x,
        });
        if kind.is_landmark() && self.landmarks.is_empty() {
            return Err(CliError::Schema(format!("landmarks: kind `{kind}` needs at least one landmark")));
        }
        let map = LandmarkMap::new(self.landmarks.clone());
        let model = make_observation_model(kind, &map, light_dark)?;
        let light_dark = (!kind.is_landmark()).then(|| light_dark.unwrap_or_else(|| LightDarkParams::default_for(kind)));
        Ok((model, light_dark))
    }
}

fn vector(v: &[f64], n: usize, field: &str) -> Result<DVector<f64>, CliError> {
    if v.len() != n {
        return Err(CliError::Schema(format!("{field}: expected {n} entries, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

/// Inflates each polygon and wraps it in its minimum-volume ellipse.
pub fn polygon_ellipsoids(polygons: &[Vec<[f64; 2]>], inflation: f64) -> Result<Vec<Ellipsoid>, CliError> {
    polygons
        .iter()
        .enumerate()
        .map(|(i, poly)| {
            if poly.len() < 3 {
                return Err(CliError::Schema(format!("polygon {i}: needs at least 3 vertices, got {}", poly.len())));
            }
            let points = inflate_polygon(poly, inflation)?;
            Ok(mvee(&points, MVEE_DEFAULT_TOLERANCE)?.ellipsoid)
        })
        .collect()
}

fn obstacle_set(spec: &ObstacleSpec) -> Result<ObstacleSet, CliError> {
    let d = BarrierParams::default();
    let params = match &spec.barrier {
        Some(b) => BarrierParams {
            m1: b.m1.unwrap_or(d.m1),
            m2: b.m2.unwrap_or(d.m2),
            q: b.q.unwrap_or(d.q),
            m: b.m.unwrap_or(d.m),
            riemann_points: b.riemann_points.unwrap_or(d.riemann_points),
        },
        None => d,
    };
    Ok(ObstacleSet::new(polygon_ellipsoids(&spec.polygons, spec.inflation)?, params)?)
}

fn solver_options(s: &SolverSpec) -> SolverOptions {
    let base = SolverOptions::default();
    SolverOptions {
        max_iterations: s.max_iterations.unwrap_or(base.max_iterations),
        gradient_step: s.gradient_step.unwrap_or(base.gradient_step),
        penalty_initial: s.penalty_initial.unwrap_or(base.penalty_initial),
        penalty_growth: s.penalty_growth.unwrap_or(base.penalty_growth),
        outer_rounds: s.outer_rounds.unwrap_or(base.outer_rounds),
        convergence_tol: s.convergence_tol.unwrap_or(base.convergence_tol),
        armijo: s.armijo.unwrap_or(base.armijo),
        backtrack: s.backtrack.unwrap_or(base.backtrack),
        max_backtracks: s.max_backtracks.unwrap_or(base.max_backtracks),
        constraint_margin: s.constraint_margin.unwrap_or(base.constraint_margin),
        max_step: s.max_step.unwrap_or(base.max_step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "motion": {"model": "youbot"},
        "observation": {"kind": "range_bearing"},
        "landmarks": [[1.0, 2.0]],
        "noise": {"sigma_omega": 0.001, "sigma_nu": [0.01, 0.02]},
        "initial": {"mean": [0, 0, 0], "covariance": 0.01},
        "goal": {"state": [1, 1, 0], "radius": 0.1},
        "horizon": 5,
        "weights": {"w_x": 1.0, "w_u": [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.1,0],[0,0,0,0.1]]}
    }"#;

    #[test]
    fn minimal_scenario_resolves() {
        let s = Scenario::parse(MINIMAL).unwrap();
        let r = s.resolve().unwrap();
        assert_eq!(r.problem.horizon, 5);
        assert_eq!(r.problem.noise.sigma_nu[(1, 1)], 0.02);
        assert!(r.problem.control_radius.is_infinite());
        assert_eq!(r.execution.step_budget, 50);
    }

    #[test]
    fn unknown_fields_are_rejected_with_location() {
        let bad = MINIMAL.replace("\"horizon\": 5", "\"horizon\": 5, \"horizn\": 3");
        let err = Scenario::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("horizn") && err.contains("line"), "{err}");
        let bad = MINIMAL.replace("{\"model\": \"youbot\"}", "{\"model\": \"youbot\", \"speed\": 1}");
        assert!(Scenario::parse(&bad).is_err());
    }

    #[test]
    fn dimension_mismatch_is_a_schema_error() {
        let bad = MINIMAL.replace("[0.01, 0.02]", "[0.01]");
        let err = Scenario::parse(&bad).unwrap().resolve().unwrap_err();
        assert!(matches!(err, CliError::Schema(_)), "{err}");
    }

    #[test]
    fn matrix_forms() {
        assert_eq!(MatrixSpec::Scalar(2.0).to_matrix(2, "m").unwrap(), DMatrix::identity(2, 2) * 2.0);
        let d = MatrixSpec::Diagonal(vec![1.0, 3.0]).to_matrix(2, "m").unwrap();
        assert_eq!(d[(1, 1)], 3.0);
        let f = MatrixSpec::Full(vec![vec![1.0, 2.0], vec![2.0, 5.0]]).to_matrix(2, "m").unwrap();
        assert_eq!(f[(0, 1)], 2.0);
        assert!(MatrixSpec::Full(vec![vec![1.0]]).to_matrix(2, "m").is_err());
    }
}
