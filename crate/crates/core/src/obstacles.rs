//! Ellipsoidal obstacle approximations and the barrier-function obstacle cost.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;

pub const MVEE_DEFAULT_TOLERANCE: f64 = 1e-7;
pub const MVEE_MAX_ITERATIONS: usize = 10_000;
/// Offset used to lift rank-deficient point sets into full dimension.
pub const MVEE_REGULARIZATION: f64 = 1e-6;
/// Barrier value reported when the query sits on a singular sample point.
pub const OBF_CLAMP: f64 = 1e18;
const OBF_SINGULAR_RADIUS: f64 = 1e-9;

/// Ellipsoid `{x : (x − c)ᵀ E (x − c) ≤ 1}` with its principal axis endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    /// Endpoints of the longest axis.
    pub major: [DVector<f64>; 2],
    /// Endpoints of the shortest axis.
    pub minor: [DVector<f64>; 2],
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let d = center.len();
        linalg::check_square("ellipsoid shape", &shape, d)?;
        if d == 0 {
            return Err(Error::Input("ellipsoid must have at least one dimension".into()));
        }
        let shape = linalg::symmetrize(&shape);
        let eig = SymmetricEigen::new(shape.clone());
        let (mut lo, mut hi) = (0, 0);
        for i in 0..d {
            if eig.eigenvalues[i] < eig.eigenvalues[lo] {
                lo = i;
            }
            if eig.eigenvalues[i] > eig.eigenvalues[hi] {
                hi = i;
            }
        }
        if !(eig.eigenvalues[lo] > 0.0) {
            return Err(Error::Input("ellipsoid shape matrix must be positive definite".into()));
        }
        let endpoints = |i: usize| {
            let half = eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt();
            [&center + &half, &center - &half]
        };
        let major = endpoints(lo);
        let minor = endpoints(hi);
        Ok(Self {
            center,
            shape,
            major,
            minor,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(x − c)ᵀ E (x − c)`.
    pub fn level(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        (d.transpose() * &self.shape * &d)[(0, 0)]
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.level(x) <= 1.0
    }

    /// Image under `x ↦ R x + t` for an orthogonal `R`. Axis endpoints are
    /// mapped directly so the barrier samples move with the ellipsoid.
    pub fn transformed(&self, rotation: &DMatrix<f64>, translation: &DVector<f64>) -> Self {
        let map = |p: &DVector<f64>| rotation * p + translation;
        Self {
            center: map(&self.center),
            shape: linalg::symmetrize(&(rotation * &self.shape * rotation.transpose())),
            major: [map(&self.major[0]), map(&self.major[1])],
            minor: [map(&self.minor[0]), map(&self.minor[1])],
        }
    }

    /// Planar export row `(c_x, c_y, E₁₁, E₁₂, E₂₂)`.
    pub fn planar_row(&self) -> Option<[f64; 5]> {
        (self.dim() == 2).then(|| {
            [
                self.center[0],
                self.center[1],
                self.shape[(0, 0)],
                self.shape[(0, 1)],
                self.shape[(1, 1)],
            ]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MveeResult {
    pub ellipsoid: Ellipsoid,
    pub iterations: usize,
    /// The input was rank deficient and was lifted before solving.
    pub regularized: bool,
    /// Duality gap fell below the tolerance before the iteration cap.
    pub converged: bool,
}

/// Minimum-volume enclosing ellipsoid by Khachiyan's algorithm with
/// Todd–Yildirim away steps. The returned shape is scaled so that every
/// input point satisfies `(p − c)ᵀ E (p − c) ≤ 1`.
pub fn mvee(points: &[DVector<f64>], tolerance: f64) -> Result<MveeResult> {
    let Some(first) = points.first() else {
        return Err(Error::Input("mvee needs at least one point".into()));
    };
    let d = first.len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Input("mvee points must share a positive dimension".into()));
    }
    if points.iter().any(|p| !linalg::all_finite(p)) {
        return Err(Error::Input("mvee points must be finite".into()));
    }
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("mvee tolerance must be positive, got {tolerance}")));
    }

    let (cloud, regularized) = lift_degenerate(points);
    let n = cloud.len();
    let mean = cloud.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n as f64;
    let scale = cloud
        .iter()
        .map(|p| (p - &mean).amax())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let normalized: Vec<DVector<f64>> = cloud.iter().map(|p| (p - &mean) / scale).collect();

    let lifted = DMatrix::from_fn(d + 1, n, |i, j| if i < d { normalized[j][i] } else { 1.0 });
    let dim = (d + 1) as f64;
    let mut u = DVector::from_element(n, 1.0 / n as f64);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MVEE_MAX_ITERATIONS {
        let x = &lifted * DMatrix::from_diagonal(&u) * lifted.transpose();
        let Some(x_inv) = linalg::symmetrize(&x).cholesky().map(|c| c.inverse()) else {
            return Err(Error::Numerical {
                what: "mvee moment matrix lost positive definiteness".into(),
                step: Some(iterations),
                condition: linalg::symmetric_condition(&x),
            });
        };
        let m: Vec<f64> = (0..n)
            .map(|j| {
                let q = lifted.column(j);
                (q.transpose() * &x_inv * q)[(0, 0)]
            })
            .collect();
        let (j_max, m_max) = argmax(m.iter().copied());
        let (j_min, m_min) = argmax((0..n).map(|j| if u[j] > 0.0 { -m[j] } else { f64::NEG_INFINITY }));
        let m_min = -m_min;
        let eps_plus = m_max / dim - 1.0;
        let eps_minus = 1.0 - m_min / dim;
        if eps_plus.max(eps_minus) <= tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        if eps_plus >= eps_minus {
            let beta = (m_max - dim) / (dim * (m_max - 1.0));
            u *= 1.0 - beta;
            u[j_max] += beta;
        } else {
            let beta = ((m_min - dim) / (dim * (m_min - 1.0))).max(-u[j_min] / (1.0 - u[j_min]));
            u *= 1.0 - beta;
            u[j_min] += beta;
            if u[j_min] < 0.0 {
                u[j_min] = 0.0;
            }
        }
    }

    let pts = DMatrix::from_fn(d, n, |i, j| normalized[j][i]);
    let c = &pts * &u;
    let second = &pts * DMatrix::from_diagonal(&u) * pts.transpose() - &c * c.transpose();
    let Some(inv) = linalg::symmetrize(&second).cholesky().map(|ch| ch.inverse()) else {
        return Err(Error::Numerical {
            what: "mvee scatter matrix is singular".into(),
            step: Some(iterations),
            condition: linalg::symmetric_condition(&second),
        });
    };
    let mut shape_n = inv / d as f64;
    let worst = normalized
        .iter()
        .map(|p| {
            let r = p - &c;
            (r.transpose() * &shape_n * &r)[(0, 0)]
        })
        .fold(0.0_f64, f64::max);
    if worst > 1.0 {
        shape_n /= worst;
    }

    let center = &mean + &c * scale;
    let mut shape = linalg::symmetrize(&(shape_n / (scale * scale)));
    // Undo normalization round-off so containment holds in the original frame.
    let worst = points
        .iter()
        .map(|p| {
            let r = p - &center;
            (r.transpose() * &shape * &r)[(0, 0)]
        })
        .fold(0.0_f64, f64::max);
    if worst > 1.0 {
        shape /= worst;
    }
    Ok(MveeResult {
        ellipsoid: Ellipsoid::new(center, shape)?,
        iterations,
        regularized,
        converged,
    })
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

/// Adds `p ± δ v` for every null direction `v` of the centered cloud.
fn lift_degenerate(points: &[DVector<f64>]) -> (Vec<DVector<f64>>, bool) {
    let d = points[0].len();
    let n = points.len();
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n as f64;
    let centered = DMatrix::from_fn(d, n, |i, j| points[j][i] - mean[i]);
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = &svd.singular_values;
    let max_sv = sv.iter().fold(0.0_f64, |a, b| a.max(*b));
    let scale = points.iter().map(|p| p.amax()).fold(1.0_f64, f64::max);
    let floor = 1e-12 * max_sv.max(scale);
    let mut null: Vec<DVector<f64>> = (0..sv.len()).filter(|&i| sv[i] <= floor).map(|i| u.column(i).into_owned()).collect();
    // A thin SVD of d × n with n < d only yields n directions; complete the basis.
    if sv.len() < d {
        let span = u.columns(0, sv.len()).into_owned();
        let projector = DMatrix::identity(d, d) - &span * span.transpose();
        let eig = SymmetricEigen::new(linalg::symmetrize(&projector));
        for i in 0..d {
            if eig.eigenvalues[i] > 0.5 {
                null.push(eig.eigenvectors.column(i).into_owned());
            }
        }
    }
    if null.is_empty() {
        return (points.to_vec(), false);
    }
    let mut out = Vec::with_capacity(n * (1 + 2 * null.len()));
    for p in points {
        out.push(p.clone());
        for v in &null {
            out.push(p + v * MVEE_REGULARIZATION);
            out.push(p - v * MVEE_REGULARIZATION);
        }
    }
    (out, true)
}

/// Replaces each vertex by eight points on a circle of the given radius
/// around it. A zero radius returns the vertices unchanged.
pub fn inflate_polygon(vertices: &[[f64; 2]], radius: f64) -> Result<Vec<DVector<f64>>> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::Input(format!("inflation radius must be non-negative, got {radius}")));
    }
    if radius == 0.0 {
        return Ok(vertices.iter().map(|v| DVector::from_column_slice(v)).collect());
    }
    Ok(vertices
        .iter()
        .flat_map(|v| {
            (0..8).map(move |k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                DVector::from_vec(vec![v[0] + radius * a.cos(), v[1] + radius * a.sin()])
            })
        })
        .collect())
}

/// Barrier constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierParams {
    pub m1: f64,
    pub m2: f64,
    pub q: u32,
    /// Axis sample spacing is `1/m`.
    pub m: u32,
    pub riemann_points: usize,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self {
            m1: 10.0,
            m2: 0.1,
            q: 2,
            m: 10,
            riemann_points: 5,
        }
    }
}

impl BarrierParams {
    pub fn eps_m(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m1 >= 0.0 && self.m2 >= 0.0) {
            return Err(Error::Config("barrier amplitudes must be non-negative".into()));
        }
        if self.q == 0 || self.m == 0 || self.riemann_points == 0 {
            return Err(Error::Config("q, m and riemann_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Barrier value together with a flag set when it was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObfValue {
    pub value: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSet {
    ellipsoids: Vec<Ellipsoid>,
    params: BarrierParams,
    /// Singular sample points along both axes, per ellipsoid.
    samples: Vec<Vec<DVector<f64>>>,
}

impl ObstacleSet {
    pub fn new(ellipsoids: Vec<Ellipsoid>, params: BarrierParams) -> Result<Self> {
        params.validate()?;
        if let Some(first) = ellipsoids.first() {
            if ellipsoids.iter().any(|e| e.dim() != first.dim()) {
                return Err(Error::Input("all ellipsoids must share a dimension".into()));
            }
        }
        let samples = ellipsoids
            .iter()
            .map(|e| {
                (0..=params.m)
                    .flat_map(|k| {
                        let theta = k as f64 / params.m as f64;
                        [
                            &e.major[0] * theta + &e.major[1] * (1.0 - theta),
                            &e.minor[0] * theta + &e.minor[1] * (1.0 - theta),
                        ]
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            ellipsoids,
            params,
            samples,
        })
    }

    pub fn ellipsoids(&self) -> &[Ellipsoid] {
        &self.ellipsoids
    }

    pub fn params(&self) -> &BarrierParams {
        &self.params
    }

    pub fn is_empty(&self) -> bool {
        self.ellipsoids.is_empty()
    }

    /// Position dimension the set lives in (0 when empty).
    pub fn dim(&self) -> usize {
        self.ellipsoids.first().map_or(0, Ellipsoid::dim)
    }

    pub fn transformed(&self, rotation: &DMatrix<f64>, translation: &DVector<f64>) -> Result<Self> {
        Self::new(
            self.ellipsoids.iter().map(|e| e.transformed(rotation, translation)).collect(),
            self.params,
        )
    }

    /// Barrier function Φ at a position, clamped to [`OBF_CLAMP`].
    pub fn obf(&self, x: &DVector<f64>) -> ObfValue {
        let p = &self.params;
        let mut total = 0.0;
        for (e, samples) in self.ellipsoids.iter().zip(&self.samples) {
            total += p.m1 * (-e.level(x).powi(p.q as i32)).exp();
            if p.m2 > 0.0 {
                for s in samples {
                    let r2 = (x - s).norm_squared();
                    if r2 <= OBF_SINGULAR_RADIUS * OBF_SINGULAR_RADIUS {
                        return ObfValue {
                            value: OBF_CLAMP,
                            clamped: true,
                        };
                    }
                    total += p.m2 / r2;
                }
            }
        }
        if total >= OBF_CLAMP || total.is_nan() {
            return ObfValue {
                value: OBF_CLAMP,
                clamped: true,
            };
        }
        ObfValue {
            value: total,
            clamped: false,
        }
    }

    pub fn obf_value(&self, x: &DVector<f64>) -> f64 {
        self.obf(x).value
    }

    /// Midpoint-rule line integral of Φ from `x1` to `x2`.
    pub fn obstacle_cost(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> f64 {
        if self.ellipsoids.is_empty() {
            return 0.0;
        }
        let r = self.params.riemann_points;
        let delta = x2 - x1;
        let length = delta.norm();
        if length == 0.0 {
            return 0.0;
        }
        let sum: f64 = (1..=r)
            .map(|j| self.obf_value(&(x1 + &delta * ((j as f64 - 0.5) / r as f64))))
            .sum();
        (length / r as f64) * sum
    }

    /// True when `x` lies strictly outside every ellipsoid.
    pub fn clear_of(&self, x: &DVector<f64>) -> bool {
        self.ellipsoids.iter().all(|e| e.level(x) > 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    #[test]
    fn mvee_of_diamond_is_unit_circle() {
        let pts = vec![p(1.0, 0.0), p(-1.0, 0.0), p(0.0, 1.0), p(0.0, -1.0)];
        let r = mvee(&pts, MVEE_DEFAULT_TOLERANCE).unwrap();
        assert!(r.ellipsoid.center.amax() < 1e-4);
        assert!((&r.ellipsoid.shape - DMatrix::identity(2, 2)).amax() < 1e-4);
        for q in &pts {
            assert_relative_eq!(r.ellipsoid.level(q), 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn mvee_of_square_corners() {
        let pts = vec![p(1.0, 1.0), p(-1.0, 1.0), p(1.0, -1.0), p(-1.0, -1.0)];
        let r = mvee(&pts, MVEE_DEFAULT_TOLERANCE).unwrap();
        assert!(r.ellipsoid.center.amax() < 1e-4);
        assert!((&r.ellipsoid.shape - DMatrix::identity(2, 2) * 0.5).amax() < 1e-4);
        assert!(!r.regularized);
    }

    #[test]
    fn mvee_of_repeated_point() {
        let pts = vec![p(2.0, -1.0); 3];
        let r = mvee(&pts, MVEE_DEFAULT_TOLERANCE).unwrap();
        assert!(r.regularized);
        assert!((&r.ellipsoid.center - p(2.0, -1.0)).amax() < 1e-6);
    }

    #[test]
    fn mvee_of_collinear_points() {
        let pts = vec![p(0.0, 0.0), p(1.0, 1.0), p(2.0, 2.0)];
        let r = mvee(&pts, MVEE_DEFAULT_TOLERANCE).unwrap();
        assert!(r.regularized);
        for q in &pts {
            assert!(r.ellipsoid.level(q) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn axis_endpoints_on_boundary() {
        let e = Ellipsoid::new(p(1.0, 2.0), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        for q in e.major.iter().chain(e.minor.iter()) {
            assert_relative_eq!(e.level(q), 1.0, epsilon = 1e-8);
        }
        assert!((&e.major[0] - &e.major[1]).norm() > (&e.minor[0] - &e.minor[1]).norm());
    }

    #[test]
    fn inflate_examples() {
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let same = inflate_polygon(&square, 0.0).unwrap();
        assert_eq!(same.len(), 4);
        let pts = inflate_polygon(&[[0.0, 0.0]], 1.0).unwrap();
        assert_eq!(pts.len(), 8);
        for q in &pts {
            assert_relative_eq!(q.norm(), 1.0, epsilon = 1e-15);
        }
        let small = mvee(&same, MVEE_DEFAULT_TOLERANCE).unwrap().ellipsoid;
        let big = mvee(&inflate_polygon(&square, 0.1).unwrap(), MVEE_DEFAULT_TOLERANCE).unwrap().ellipsoid;
        // Strict containment: boundary samples of the small ellipse are interior to the big one.
        for k in 0..64 {
            let a = k as f64 * std::f64::consts::TAU / 64.0;
            let dir = p(a.cos(), a.sin());
            let t = 1.0 / small.level(&(&small.center + &dir)).sqrt();
            assert!(big.level(&(&small.center + dir * t)) < 1.0);
        }
    }

    #[test]
    fn obf_examples() {
        let params = BarrierParams {
            m1: 3.0,
            m2: 0.0,
            q: 1,
            ..BarrierParams::default()
        };
        let set = ObstacleSet::new(vec![Ellipsoid::new(p(0.0, 0.0), DMatrix::identity(2, 2)).unwrap()], params).unwrap();
        assert_relative_eq!(set.obf_value(&p(0.0, 0.0)), 3.0);
        assert_relative_eq!(set.obf_value(&p(0.6, 0.8)), 3.0 * (-1.0_f64).exp(), epsilon = 1e-14);
        assert!(set.obf_value(&p(1e3, 0.0)) < 1e-12);
    }

    #[test]
    fn obf_clamps_on_samples() {
        let set = ObstacleSet::new(
            vec![Ellipsoid::new(p(0.0, 0.0), DMatrix::identity(2, 2)).unwrap()],
            BarrierParams::default(),
        )
        .unwrap();
        let v = set.obf(&p(0.0, 0.0));
        assert!(v.clamped);
        assert_eq!(v.value, OBF_CLAMP);
    }

    #[test]
    fn obstacle_cost_examples() {
        let set = ObstacleSet::new(
            vec![Ellipsoid::new(p(0.0, 0.0), DMatrix::identity(2, 2) * 4.0).unwrap()],
            BarrierParams::default(),
        )
        .unwrap();
        let a = p(1.0, 1.0);
        assert_eq!(set.obstacle_cost(&a, &a), 0.0);
        let far = set.obstacle_cost(&p(1000.0, 0.0), &p(1001.0, 0.0));
        assert!(far < 1e-6 * 10.0);
    }
}
