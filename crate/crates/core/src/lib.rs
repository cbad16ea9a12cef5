//! Belief-space motion planning with trajectory-optimized LQG (T-LQG).
//!
//! Planning under motion and sensing uncertainty is reduced to a
//! deterministic nonlinear program over a nominal control sequence. The
//! optimized trajectory is then tracked with an LQR controller and a Kalman
//! filter, and the loop replans whenever the filtered belief drifts too far
//! from the nominal one.

pub mod belief;
pub mod controller;
pub mod error;
pub mod error_analysis;
pub mod executor;
pub mod linalg;
pub mod models;
pub mod obstacles;
pub mod planner;

pub use error::{Error, Result};

pub use belief::{CostWeights, GaussianBelief, RiccatiStep};
pub use controller::LqgPolicy;
pub use executor::{ExecutionConfig, ExecutionStatus, ExecutionTrace};
pub use models::{LandmarkMap, MotionModel, NoiseSpec, ObservationKind, ObservationModel};
pub use obstacles::{Ellipsoid, ObstacleSet};
pub use planner::{NominalTrajectory, PlanResult, PlanningProblem, SolverOptions};
