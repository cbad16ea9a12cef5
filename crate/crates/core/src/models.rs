//! Motion and observation models, their Jacobians, and the concrete models
//! used by the shipped scenarios.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Discrete-time motion model `x_{t+1} = f(x_t, u_t, ω_t)`.
pub trait MotionModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;

    /// `(A, B, G)` evaluated at `ω = 0`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

    /// Number of leading state components that are planar position.
    fn position_dims(&self) -> usize {
        self.state_dim().min(2)
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.evaluate(x, u, &DVector::zeros(self.noise_dim()))
    }
}

/// Observation model `z_t = h(x_t, ν_t)`.
pub trait ObservationModel: Send + Sync + fmt::Debug {
    fn obs_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn evaluate(&self, x: &DVector<f64>, nu: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(H, M)` evaluated at `ν = 0`.
    fn jacobians(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    /// Indices of observation components that are angles; innovations on
    /// these are wrapped to (−π, π].
    fn angular_components(&self) -> Vec<usize> {
        Vec::new()
    }

    fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.evaluate(x, &DVector::zeros(self.noise_dim()))
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    if w <= -PI {
        w + two_pi
    } else {
        w
    }
}

/// Process and measurement noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigma_omega: DMatrix<f64>,
    pub sigma_nu: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn new(sigma_omega: DMatrix<f64>, sigma_nu: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("sigma_omega", &sigma_omega), ("sigma_nu", &sigma_nu)] {
            if !m.is_square() {
                return Err(Error::Config(format!("{name} must be square, got {}x{}", m.nrows(), m.ncols())));
            }
            if !linalg::is_symmetric(m, 1e-10 * (1.0 + m.amax())) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            if m.nrows() > 0 && linalg::min_eigenvalue(m) < -1e-12 {
                return Err(Error::Config(format!("{name} must be positive semidefinite")));
            }
        }
        Ok(Self { sigma_omega, sigma_nu })
    }

    pub fn zero(noise_omega: usize, noise_nu: usize) -> Self {
        Self {
            sigma_omega: DMatrix::zeros(noise_omega, noise_omega),
            sigma_nu: DMatrix::zeros(noise_nu, noise_nu),
        }
    }

    pub fn check_against(&self, motion: &dyn MotionModel, obs: &dyn ObservationModel) -> Result<()> {
        linalg::check_square("sigma_omega", &self.sigma_omega, motion.noise_dim())?;
        linalg::check_square("sigma_nu", &self.sigma_nu, obs.noise_dim())
    }
}

/// Planar landmark positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkMap {
    pub landmarks: Vec<[f64; 2]>,
}

impl LandmarkMap {
    pub fn new(landmarks: Vec<[f64; 2]>) -> Self {
        Self { landmarks }
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }
}

/// Wheel geometry of a four-wheel mecanum base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MecanumGeometry {
    pub wheel_radius: f64,
    /// Half the distance between front and rear axles.
    pub half_length: f64,
    /// Half the distance between left and right wheels.
    pub half_width: f64,
}

impl Default for MecanumGeometry {
    fn default() -> Self {
        Self {
            wheel_radius: 0.05,
            half_length: 0.235,
            half_width: 0.15,
        }
    }
}

/// Omnidirectional base `x_{t+1} = x_t + B u_t dt + G ω_t √dt` with state
/// `(x, y, θ)` and wheel speeds ordered front-left, front-right, rear-left,
/// rear-right.
///
/// Body-frame velocities are mapped with a constant matrix, so the heading
/// does not rotate the commanded motion. This keeps the model exactly affine.
#[derive(Debug, Clone, PartialEq)]
pub struct YoubotBase {
    pub geometry: MecanumGeometry,
    pub dt: f64,
    b: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl YoubotBase {
    pub fn new(geometry: MecanumGeometry, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let MecanumGeometry {
            wheel_radius: r,
            half_length: l1,
            half_width: l2,
        } = geometry;
        if !(r > 0.0 && l1 > 0.0 && l2 > 0.0) {
            return Err(Error::Config("wheel geometry parameters must be positive".into()));
        }
        let k = 1.0 / (l1 + l2);
        #[rustfmt::skip]
        let kin = DMatrix::from_row_slice(3, 4, &[
             1.0, 1.0,  1.0, 1.0,
            -1.0, 1.0,  1.0, -1.0,
            -k,   k,   -k,   k,
        ]) * (r / 4.0);
        Ok(Self {
            geometry,
            dt,
            b: kin * dt,
            g: DMatrix::identity(3, 3) * dt.sqrt(),
        })
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
}

/// Convenience constructor matching the model zoo naming.
pub fn youbot_motion(geometry: MecanumGeometry, dt: f64) -> Result<YoubotBase> {
    YoubotBase::new(geometry, dt)
}

impl MotionModel for YoubotBase {
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        4
    }
    fn noise_dim(&self) -> usize {
        3
    }

    fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        x + &self.b * u + &self.g * w
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::identity(3, 3), self.b.clone(), self.g.clone())
    }
}

/// Time-invariant linear model `x_{t+1} = A x + B u + G ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMotion {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl LinearMotion {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        linalg::check_square("LinearMotion A", &a, n)?;
        if b.nrows() != n || g.nrows() != n {
            return Err(Error::dim("LinearMotion B/G rows", n, format!("{}/{}", b.nrows(), g.nrows())));
        }
        Ok(Self { a, b, g })
    }
}

impl MotionModel for LinearMotion {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }
    fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.g * w
    }
    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone(), self.g.clone())
    }
}

/// Time-invariant linear sensor `z = H x + M ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl LinearObservation {
    pub fn new(h: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        if h.nrows() != m.nrows() {
            return Err(Error::dim("LinearObservation M rows", h.nrows(), m.nrows()));
        }
        Ok(Self { h, m })
    }
}

impl ObservationModel for LinearObservation {
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    fn noise_dim(&self) -> usize {
        self.m.ncols()
    }
    fn evaluate(&self, x: &DVector<f64>, nu: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.h * x + &self.m * nu)
    }
    fn jacobians(&self, _x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.h.clone(), self.m.clone()))
    }
}

/// Observation model selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObservationKind {
    RangeBearing,
    BearingOnly,
    RangeOnly,
    RangeSquared,
    LightDarkQuadratic,
    LightDarkHyperbolic,
}

impl ObservationKind {
    pub const ALL: [ObservationKind; 6] = [
        ObservationKind::RangeBearing,
        ObservationKind::BearingOnly,
        ObservationKind::RangeOnly,
        ObservationKind::RangeSquared,
        ObservationKind::LightDarkQuadratic,
        ObservationKind::LightDarkHyperbolic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObservationKind::RangeBearing => "range_bearing",
            ObservationKind::BearingOnly => "bearing_only",
            ObservationKind::RangeOnly => "range_only",
            ObservationKind::RangeSquared => "range_squared",
            ObservationKind::LightDarkQuadratic => "light_dark_quadratic",
            ObservationKind::LightDarkHyperbolic => "light_dark_hyperbolic",
        }
    }

    pub fn is_landmark(self) -> bool {
        !matches!(self, ObservationKind::LightDarkQuadratic | ObservationKind::LightDarkHyperbolic)
    }
}

impl fmt::Display for ObservationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObservationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObservationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown observation model kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reading {
    Range,
    Bearing,
    RangeSquared,
}

/// Per-landmark range/bearing sensor with additive noise (`M = I`).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSensor {
    kind: ObservationKind,
    map: LandmarkMap,
    readings: Vec<Reading>,
}

impl LandmarkSensor {
    pub fn new(kind: ObservationKind, map: LandmarkMap) -> Result<Self> {
        let readings = match kind {
            ObservationKind::RangeBearing => vec![Reading::Range, Reading::Bearing],
            ObservationKind::BearingOnly => vec![Reading::Bearing],
            ObservationKind::RangeOnly => vec![Reading::Range],
            ObservationKind::RangeSquared => vec![Reading::RangeSquared],
            other => return Err(Error::Config(format!("`{other}` is not a landmark sensor"))),
        };
        if map.is_empty() {
            return Err(Error::Config(format!("`{kind}` needs at least one landmark")));
        }
        Ok(Self { kind, map, readings })
    }

    pub fn kind(&self) -> ObservationKind {
        self.kind
    }

    pub fn map(&self) -> &LandmarkMap {
        &self.map
    }

    fn offsets(&self, x: &DVector<f64>) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (px, py) = (x[0], x[1]);
        self.map.landmarks.iter().map(move |l| (l[0] - px, l[1] - py))
    }
}

impl ObservationModel for LandmarkSensor {
    fn obs_dim(&self) -> usize {
        self.readings.len() * self.map.landmarks.len()
    }

    fn noise_dim(&self) -> usize {
        self.obs_dim()
    }

    fn evaluate(&self, x: &DVector<f64>, nu: &DVector<f64>) -> Result<DVector<f64>> {
        let heading = if x.len() > 2 { x[2] } else { 0.0 };
        let mut z = DVector::zeros(self.obs_dim());
        let mut i = 0;
        for (dx, dy) in self.offsets(x) {
            let r2 = dx * dx + dy * dy;
            for reading in &self.readings {
                z[i] = match reading {
                    Reading::Range => r2.sqrt() + nu[i],
                    Reading::RangeSquared => r2 + nu[i],
                    Reading::Bearing => {
                        if r2 == 0.0 {
                            return Err(Error::Singular("bearing requested at a landmark position".into()));
                        }
                        wrap_angle(dy.atan2(dx) - heading + nu[i])
                    }
                };
                i += 1;
            }
        }
        Ok(z)
    }

    fn jacobians(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = x.len();
        let mut h = DMatrix::zeros(self.obs_dim(), n);
        let mut i = 0;
        for (dx, dy) in self.offsets(x) {
            let r2 = dx * dx + dy * dy;
            for reading in &self.readings {
                match reading {
                    Reading::Range => {
                        if r2 == 0.0 {
                            return Err(Error::Singular("range derivative at a landmark position".into()));
                        }
                        let r = r2.sqrt();
                        h[(i, 0)] = -dx / r;
                        h[(i, 1)] = -dy / r;
                    }
                    Reading::RangeSquared => {
                        h[(i, 0)] = -2.0 * dx;
                        h[(i, 1)] = -2.0 * dy;
                    }
                    Reading::Bearing => {
                        if r2 == 0.0 {
                            return Err(Error::Singular("bearing requested at a landmark position".into()));
                        }
                        h[(i, 0)] = dy / r2;
                        h[(i, 1)] = -dx / r2;
                        if n > 2 {
                            h[(i, 2)] = -1.0;
                        }
                    }
                }
                i += 1;
            }
        }
        let m = DMatrix::identity(self.obs_dim(), self.obs_dim());
        Ok((h, m))
    }

    fn angular_components(&self) -> Vec<usize> {
        let per = self.readings.len();
        (0..self.obs_dim())
            .filter(|i| self.readings[i % per] == Reading::Bearing)
            .collect()
    }
}

/// Constants of the light-dark noise profile.
///
/// Quadratic: `σ(x) = a (x_x − center)² + b`. Hyperbolic: `σ(x) = a / (x_x + c) + b`.
/// `low_noise_x` marks where the low-noise region begins along the first
/// axis; it is the minimizer for the quadratic profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightDarkParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub center: f64,
    pub low_noise_x: f64,
}

impl LightDarkParams {
    pub fn quadratic() -> Self {
        Self {
            a: 0.1,
            b: 0.01,
            c: 0.0,
            center: 3.0,
            low_noise_x: 3.0,
        }
    }

    pub fn hyperbolic() -> Self {
        Self {
            a: 1.0,
            b: 0.01,
            c: 1.0,
            center: 0.0,
            low_noise_x: 3.0,
        }
    }

    pub fn default_for(kind: ObservationKind) -> Self {
        match kind {
            ObservationKind::LightDarkHyperbolic => Self::hyperbolic(),
            _ => Self::quadratic(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightDarkProfile {
    Quadratic,
    Hyperbolic,
}

/// Position sensor whose noise scale depends on the first state coordinate:
/// `h(x, ν) = x_pos + σ(x) ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct LightDarkSensor {
    pub profile: LightDarkProfile,
    pub params: LightDarkParams,
}

impl LightDarkSensor {
    pub fn new(profile: LightDarkProfile, params: LightDarkParams) -> Result<Self> {
        if !(params.a > 0.0 && params.b > 0.0) {
            return Err(Error::Config("light-dark constants a and b must be positive".into()));
        }
        if profile == LightDarkProfile::Hyperbolic && !(params.c > 0.0) {
            return Err(Error::Config("hyperbolic light-dark constant c must be positive".into()));
        }
        Ok(Self { profile, params })
    }

    /// Noise scale σ at the given state.
    pub fn sigma(&self, x: &DVector<f64>) -> Result<f64> {
        let p = &self.params;
        match self.profile {
            LightDarkProfile::Quadratic => Ok(p.a * (x[0] - p.center).powi(2) + p.b),
            LightDarkProfile::Hyperbolic => {
                let d = x[0] + p.c;
                if !(d > 0.0) {
                    return Err(Error::Evaluation(format!(
                        "hyperbolic noise profile undefined at x = {}",
                        x[0]
                    )));
                }
                Ok(p.a / d + p.b)
            }
        }
    }

    /// Distance along the first axis from a state to the low-noise region.
    pub fn distance_to_low_noise(&self, x: &DVector<f64>) -> f64 {
        match self.profile {
            LightDarkProfile::Quadratic => (x[0] - self.params.low_noise_x).abs(),
            LightDarkProfile::Hyperbolic => (self.params.low_noise_x - x[0]).max(0.0),
        }
    }
}

impl ObservationModel for LightDarkSensor {
    fn obs_dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn evaluate(&self, x: &DVector<f64>, nu: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.sigma(x)?;
        Ok(DVector::from_vec(vec![x[0] + s * nu[0], x[1] + s * nu[1]]))
    }
    fn jacobians(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let s = self.sigma(x)?;
        let mut h = DMatrix::zeros(2, x.len());
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        Ok((h, DMatrix::identity(2, 2) * s))
    }
}

/// Builds one of the shipped observation models.
pub fn make_observation_model(
    kind: ObservationKind,
    map: &LandmarkMap,
    light_dark: Option<LightDarkParams>,
) -> Result<Arc<dyn ObservationModel>> {
    let params = light_dark.unwrap_or_else(|| LightDarkParams::default_for(kind));
    Ok(match kind {
        ObservationKind::LightDarkQuadratic => Arc::new(LightDarkSensor::new(LightDarkProfile::Quadratic, params)?),
        ObservationKind::LightDarkHyperbolic => Arc::new(LightDarkSensor::new(LightDarkProfile::Hyperbolic, params)?),
        landmark => Arc::new(LandmarkSensor::new(landmark, map.clone())?),
    })
}

/// Central-difference Jacobian of `f` at `point`.
pub fn finite_difference_jacobian<F>(f: F, point: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let n = point.len();
    let mut columns = Vec::with_capacity(n);
    let mut probe = point.clone();
    for j in 0..n {
        probe[j] = point[j] + step;
        let plus = f(&probe)?;
        probe[j] = point[j] - step;
        let minus = f(&probe)?;
        probe[j] = point[j];
        if !linalg::all_finite(&plus) || !linalg::all_finite(&minus) {
            return Err(Error::Evaluation(format!("non-finite function value probing coordinate {j}")));
        }
        if plus.len() != minus.len() {
            return Err(Error::dim("finite_difference_jacobian", plus.len(), minus.len()));
        }
        columns.push((plus - minus) / (2.0 * step));
    }
    if n == 0 {
        let m = f(point)?.len();
        return Ok(DMatrix::zeros(m, 0));
    }
    Ok(DMatrix::from_columns(&columns))
}
