//! First-order error propagation around a nominal trajectory for linear
//! time-varying LQG systems, both step by step and in closed form.
//!
//! Index conventions: `A_t, B_t, G_t, L_t` live at `t = 0..K`, while
//! `H_t, M_t` and the Kalman gains `K_t` live at `t = 1..=K`. An ordered
//! product `X̃_{a:b}` is `X_b ⋯ X_a`, the identity when `b < a`. Empty sums
//! are zero.
//!
//! Everything here is a test oracle. The composite matrices are built by
//! direct products and sums, which is quadratic in `K` per entry and fine for
//! the short horizons it is used on.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::belief::{riccati_step, standard_normal_vector, CostWeights};
use crate::controller::lqr_gains;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::NoiseSpec;

/// Linearized closed-loop system with its tracker and filter gains.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    /// `A_t`, `t = 0..K`.
    pub a: Vec<DMatrix<f64>>,
    /// `B_t`, `t = 0..K`.
    pub b: Vec<DMatrix<f64>>,
    /// `G_t`, `t = 0..K`.
    pub g: Vec<DMatrix<f64>>,
    /// `H_t`, `t = 1..=K`, stored at `t − 1`.
    pub h: Vec<DMatrix<f64>>,
    /// `M_t`, `t = 1..=K`, stored at `t − 1`.
    pub m: Vec<DMatrix<f64>>,
    pub noise: NoiseSpec,
    /// LQR gains `L_t`, `t = 0..K`. `L_0` never acts since `x̂_0 = x^p_0`.
    pub l: Vec<DMatrix<f64>>,
    /// Kalman gains `K_t`, `t = 1..=K`, stored at `t − 1`.
    pub kalman: Vec<DMatrix<f64>>,
    /// Filter covariances `P⁺_t`, `t = 0..=K`.
    pub covariances: Vec<DMatrix<f64>>,
}

impl LtvSystem {
    /// Builds the system and derives `L_t` from the backward Riccati pass and
    /// `K_t` from the filter recursion started at `p0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        g: Vec<DMatrix<f64>>,
        h: Vec<DMatrix<f64>>,
        m: Vec<DMatrix<f64>>,
        noise: NoiseSpec,
        weights: &CostWeights,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let k = a.len();
        for (name, len) in [("B", b.len()), ("G", g.len()), ("H", h.len()), ("M", m.len())] {
            if len != k {
                return Err(Error::Dimension {
                    context: "LtvSystem horizon",
                    expected: format!("{k} matrices"),
                    actual: format!("{len} for {name}"),
                });
            }
        }
        let n = p0.nrows();
        linalg::check_square("LtvSystem P0", &p0, n)?;
        for t in 0..k {
            linalg::check_square("LtvSystem A", &a[t], n)?;
            linalg::check_shape("LtvSystem B", &b[t], n, b[0].ncols())?;
            linalg::check_shape("LtvSystem G", &g[t], n, noise.sigma_omega.nrows())?;
            linalg::check_shape("LtvSystem H", &h[t], h[0].nrows(), n)?;
            linalg::check_shape("LtvSystem M", &m[t], h[0].nrows(), noise.sigma_nu.nrows())?;
        }
        let pairs: Vec<_> = a.iter().cloned().zip(b.iter().cloned()).collect();
        let (_, l) = lqr_gains(&pairs, weights)?;
        let mut covariances = vec![linalg::symmetrize(&p0)];
        let mut kalman = Vec::with_capacity(k);
        for t in 0..k {
            let step = riccati_step(&covariances[t], &a[t], &g[t], &h[t], &m[t], &noise).map_err(|e| e.at_step(t + 1))?;
            kalman.push(step.k);
            covariances.push(step.p_plus);
        }
        Ok(Self { a, b, g, h, m, noise, l, kalman, covariances })
    }

    /// A well-conditioned random system with identity weights, used by the
    /// oracle suites.
    pub fn random<R: Rng + ?Sized>(nx: usize, nu: usize, nz: usize, horizon: usize, rng: &mut R) -> Result<Self> {
        let mut uniform = |r: usize, c: usize, scale: f64| DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0));
        let mut a = Vec::with_capacity(horizon);
        let mut b = Vec::with_capacity(horizon);
        let mut g = Vec::with_capacity(horizon);
        let mut h = Vec::with_capacity(horizon);
        let mut m = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            a.push(DMatrix::identity(nx, nx) + uniform(nx, nx, 0.4));
            b.push(uniform(nx, nu, 1.0));
            g.push(DMatrix::identity(nx, nx) + uniform(nx, nx, 0.3));
            h.push(uniform(nz, nx, 1.0));
            m.push(DMatrix::identity(nz, nz) + uniform(nz, nz, 0.2));
        }
        let spd = |q: DMatrix<f64>| {
            let n = q.nrows();
            linalg::symmetrize(&(&q * q.transpose() + DMatrix::identity(n, n) * 0.1))
        };
        let noise = NoiseSpec::new(spd(uniform(nx, nx, 0.5)), spd(uniform(nz, nz, 0.5)))?;
        let p0 = spd(uniform(nx, nx, 0.7));
        let weights = CostWeights::uniform(horizon, DMatrix::identity(nx, nx), DMatrix::identity(nu, nu))?;
        Self::new(a, b, g, h, m, noise, &weights, p0)
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.covariances[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    pub fn obs_dim(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.covariances[0]
    }

    /// `H_t` for `t` in `1..=K`.
    pub fn h_at(&self, t: usize) -> &DMatrix<f64> {
        &self.h[t - 1]
    }

    /// `M_t` for `t` in `1..=K`.
    pub fn m_at(&self, t: usize) -> &DMatrix<f64> {
        &self.m[t - 1]
    }

    /// `K_t` for `t` in `1..=K`.
    pub fn kalman_at(&self, t: usize) -> &DMatrix<f64> {
        &self.kalman[t - 1]
    }

    /// `U_t = I − K_t H_t` for `t` in `1..=K`.
    pub fn u_at(&self, t: usize) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::identity(n, n) - self.kalman_at(t) * self.h_at(t)
    }
}

/// Initial state error and the noise sequences of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRealization {
    pub x0: DVector<f64>,
    /// `ω_t`, `t = 0..K`.
    pub omega: Vec<DVector<f64>>,
    /// `ν_t`, `t = 1..=K`, stored at `t − 1`.
    pub nu: Vec<DVector<f64>>,
}

impl ErrorRealization {
    pub fn zero(sys: &LtvSystem) -> Self {
        let k = sys.horizon();
        Self {
            x0: DVector::zeros(sys.state_dim()),
            omega: vec![DVector::zeros(sys.noise.sigma_omega.nrows()); k],
            nu: vec![DVector::zeros(sys.noise.sigma_nu.nrows()); k],
        }
    }

    /// Draws `x̃₀ ~ N(0, P₀)` and the noises from their covariances.
    pub fn sample<R: Rng + ?Sized>(sys: &LtvSystem, rng: &mut R) -> Self {
        let factors = NoiseFactors::new(sys);
        factors.draw(rng, None)
    }

    /// `ν_t` for `t` in `1..=K`.
    pub fn nu_at(&self, t: usize) -> &DVector<f64> {
        &self.nu[t - 1]
    }

    pub fn validate(&self, sys: &LtvSystem) -> Result<()> {
        let k = sys.horizon();
        if self.omega.len() != k || self.nu.len() != k {
            return Err(Error::Dimension {
                context: "ErrorRealization horizon",
                expected: format!("{k} process and {k} measurement noises"),
                actual: format!("{} and {}", self.omega.len(), self.nu.len()),
            });
        }
        linalg::check_len("ErrorRealization x0", &self.x0, sys.state_dim())?;
        for w in &self.omega {
            linalg::check_len("ErrorRealization omega", w, sys.noise.sigma_omega.nrows())?;
        }
        for v in &self.nu {
            linalg::check_len("ErrorRealization nu", v, sys.noise.sigma_nu.nrows())?;
        }
        Ok(())
    }
}

struct NoiseFactors {
    p0: DMatrix<f64>,
    omega: DMatrix<f64>,
    nu: DMatrix<f64>,
    k: usize,
}

impl NoiseFactors {
    fn new(sys: &LtvSystem) -> Self {
        Self {
            p0: linalg::psd_factor(sys.p0()),
            omega: linalg::psd_factor(&sys.noise.sigma_omega),
            nu: linalg::psd_factor(&sys.noise.sigma_nu),
            k: sys.horizon(),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, bias: Option<&DVector<f64>>) -> ErrorRealization {
        let mut x0 = &self.p0 * standard_normal_vector(rng, self.p0.ncols());
        if let Some(b) = bias {
            x0 += b;
        }
        let omega = (0..self.k).map(|_| &self.omega * standard_normal_vector(rng, self.omega.ncols())).collect();
        let nu = (0..self.k).map(|_| &self.nu * standard_normal_vector(rng, self.nu.ncols())).collect();
        ErrorRealization { x0, omega, nu }
    }
}

/// Error sequences of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSequences {
    /// `x̃_t = x_t − x^p_t`, `t = 0..=K`.
    pub x_tilde: Vec<DVector<f64>>,
    /// `x̌_t = x_t − x̂_t`, `t = 0..=K`.
    pub x_check: Vec<DVector<f64>>,
    /// `ũ_t`, `t = 0..K`.
    pub u_tilde: Vec<DVector<f64>>,
    /// `z̃_t`, `t = 0..=K`. There is no measurement at `t = 0`; that slot is zero.
    pub z_tilde: Vec<DVector<f64>>,
}

/// Steps the linearized closed loop: the true error through the dynamics, the
/// estimate deviation `x̂_t − x^p_t` through the filter, and the tracker on
/// the estimate.
pub fn recursive_errors(sys: &LtvSystem, real: &ErrorRealization) -> Result<ErrorSequences> {
    real.validate(sys)?;
    let k = sys.horizon();
    let n = sys.state_dim();
    let mut x_tilde = vec![real.x0.clone()];
    let mut estimate = vec![DVector::zeros(n)];
    let mut u_tilde = Vec::with_capacity(k);
    let mut z_tilde = vec![DVector::zeros(sys.obs_dim())];
    for t in 0..k {
        let u = -(&sys.l[t] * &estimate[t]);
        let x_next = &sys.a[t] * &x_tilde[t] + &sys.b[t] * &u + &sys.g[t] * &real.omega[t];
        let z = sys.h_at(t + 1) * &x_next + sys.m_at(t + 1) * real.nu_at(t + 1);
        let predicted = &sys.a[t] * &estimate[t] + &sys.b[t] * &u;
        let innovation = &z - sys.h_at(t + 1) * &predicted;
        estimate.push(predicted + sys.kalman_at(t + 1) * innovation);
        x_tilde.push(x_next);
        u_tilde.push(u);
        z_tilde.push(z);
    }
    let x_check = x_tilde.iter().zip(&estimate).map(|(x, e)| x - e).collect();
    Ok(ErrorSequences { x_tilde, x_check, u_tilde, z_tilde })
}

/// `X_b ⋯ X_a`, or the `n × n` identity when `b < a`.
pub fn ordered_product(mats: &[DMatrix<f64>], a: i64, b: i64, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(n, n);
    if b < a {
        return out;
    }
    for i in a..=b {
        out = &mats[i as usize] * out;
    }
    out
}

fn table(rows: usize, cols: usize) -> Vec<Vec<DMatrix<f64>>> {
    vec![vec![DMatrix::zeros(0, 0); cols]; rows]
}

fn range_error(what: &str, t: i64, lo: i64, hi: i64) -> Error {
    Error::Input(format!("{what}: t={t} outside {lo}..={hi}"))
}

/// Closed-form sensitivities of the estimation, state, control and
/// observation errors to `x̃₀`, `ω` and `ν`.
#[derive(Debug, Clone)]
pub struct Composites {
    sys: LtvSystem,
    /// `F_t = U_{t+1} A_t`.
    f: Vec<DMatrix<f64>>,
    /// `D_0 = A_0`, `D_t = A_t − B_t L_t`.
    d: Vec<DMatrix<f64>>,
    // State sensitivities, indexed [t + 1] so that t = −1 fits.
    dx0: Vec<DMatrix<f64>>,
    dw: Vec<Vec<DMatrix<f64>>>,
    dnu: Vec<Vec<DMatrix<f64>>>,
    // Control sensitivities at time τ; lnu[τ][s] multiplies ν_{s+1}.
    lx0: Vec<DMatrix<f64>>,
    lw: Vec<Vec<DMatrix<f64>>>,
    lnu: Vec<Vec<DMatrix<f64>>>,
    // Observation sensitivities at time τ = 1..=K.
    hx0: Vec<DMatrix<f64>>,
    hw: Vec<Vec<DMatrix<f64>>>,
    hnu: Vec<Vec<DMatrix<f64>>>,
}

impl Composites {
    pub fn new(sys: &LtvSystem) -> Self {
        let k = sys.horizon();
        let n = sys.state_dim();
        let f: Vec<_> = (0..k).map(|t| sys.u_at(t + 1) * &sys.a[t]).collect();
        let d: Vec<_> = (0..k)
            .map(|t| if t == 0 { sys.a[0].clone() } else { &sys.a[t] - &sys.b[t] * &sys.l[t] })
            .collect();
        let ft = |a: i64, b: i64| ordered_product(&f, a, b, n);
        let dt = |a: i64, b: i64| ordered_product(&d, a, b, n);

        // Tracker response to the estimation error: L_t F̃_{0:t−1}, and so on.
        let mut fx0 = Vec::with_capacity(k);
        let mut fw = table(k, k);
        let mut fnu = table(k, k + 1);
        for t in 0..k {
            let ti = t as i64;
            fx0.push(&sys.l[t] * ft(0, ti - 1));
            for s in 0..t {
                fw[t][s] = &sys.l[t] * ft(s as i64 + 1, ti - 1) * sys.u_at(s + 1) * &sys.g[s];
            }
            for s in 1..=t {
                fnu[t][s] = &sys.l[t] * ft(s as i64, ti - 1) * sys.kalman_at(s) * sys.m_at(s);
            }
        }

        let mut dx0 = Vec::with_capacity(k + 1);
        let mut dw = table(k + 1, k);
        let mut dnu = table(k + 1, k + 1);
        dx0.push(DMatrix::identity(n, n));
        for t in 0..k {
            let ti = t as i64;
            let mut x0 = dt(0, ti);
            for r in 1..=t {
                x0 += dt(r as i64 + 1, ti) * &sys.b[r] * &fx0[r];
            }
            dx0.push(x0);
            for s in 0..=t {
                let mut acc = dt(s as i64 + 1, ti) * &sys.g[s];
                for r in s + 1..=t {
                    acc += dt(r as i64 + 1, ti) * &sys.b[r] * &fw[r][s];
                }
                dw[t + 1][s] = acc;
            }
            for s in 1..=t {
                let mut acc = DMatrix::zeros(n, sys.noise.sigma_nu.nrows());
                for r in s..=t {
                    acc += dt(r as i64 + 1, ti) * &sys.b[r] * &fnu[r][s];
                }
                dnu[t + 1][s] = acc;
            }
        }

        let mut lx0 = Vec::with_capacity(k);
        let mut lw = table(k, k);
        let mut lnu = table(k, k);
        for tau in 0..k {
            lx0.push(&sys.l[tau] * &dx0[tau] - &fx0[tau]);
            for s in 0..tau {
                lw[tau][s] = &sys.l[tau] * &dw[tau][s] - &fw[tau][s];
            }
            for s in 0..tau {
                lnu[tau][s] = if s + 1 == tau {
                    fnu[tau][tau].clone()
                } else {
                    &fnu[tau][s + 1] - &sys.l[tau] * &dnu[tau][s + 1]
                };
            }
        }

        let mut hx0 = vec![DMatrix::zeros(0, 0)];
        let mut hw = table(k + 1, k);
        let mut hnu = table(k + 1, k + 1);
        for tau in 1..=k {
            let h = sys.h_at(tau);
            hx0.push(h * &dx0[tau]);
            for s in 0..tau {
                hw[tau][s] = h * &dw[tau][s];
            }
            for s in 1..tau {
                hnu[tau][s] = -(h * &dnu[tau][s]);
            }
            hnu[tau][tau] = sys.m_at(tau).clone();
        }

        Self { sys: sys.clone(), f, d, dx0, dw, dnu, lx0, lw, lnu, hx0, hw, hnu }
    }

    pub fn system(&self) -> &LtvSystem {
        &self.sys
    }

    /// `F̃_{a:b}`.
    pub fn f_product(&self, a: i64, b: i64) -> DMatrix<f64> {
        ordered_product(&self.f, a, b, self.sys.state_dim())
    }

    /// `D̃_{a:b}`.
    pub fn d_product(&self, a: i64, b: i64) -> DMatrix<f64> {
        ordered_product(&self.d, a, b, self.sys.state_dim())
    }

    /// `x̌_{t+1}` for `t` in `−1..K`.
    pub fn estimation_error(&self, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
        let k = self.sys.horizon() as i64;
        if t < -1 || t > k - 1 {
            return Err(range_error("estimation error", t, -1, k - 1));
        }
        real.validate(&self.sys)?;
        let mut out = self.f_product(0, t) * &real.x0;
        for s in 0..=t {
            let su = s as usize;
            let drive = self.sys.u_at(su + 1) * &self.sys.g[su] * &real.omega[su]
                - self.sys.kalman_at(su + 1) * self.sys.m_at(su + 1) * real.nu_at(su + 1);
            out += self.f_product(s + 1, t) * drive;
        }
        Ok(out)
    }

    /// `x̃_{t+1}` for `t` in `−1..K`.
    pub fn state_error(&self, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
        let k = self.sys.horizon() as i64;
        if t < -1 || t > k - 1 {
            return Err(range_error("state error", t, -1, k - 1));
        }
        real.validate(&self.sys)?;
        let i = (t + 1) as usize;
        let mut out = &self.dx0[i] * &real.x0;
        for s in 0..i {
            out += &self.dw[i][s] * &real.omega[s];
        }
        for s in 1..i {
            out -= &self.dnu[i][s] * real.nu_at(s);
        }
        Ok(out)
    }

    /// `ũ_{t+1}` for `t` in `−1..K−1`.
    pub fn control_error(&self, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
        let k = self.sys.horizon() as i64;
        if t < -1 || t > k - 2 {
            return Err(range_error("control error", t, -1, k - 2));
        }
        real.validate(&self.sys)?;
        let tau = (t + 1) as usize;
        let mut out = -(&self.lx0[tau] * &real.x0);
        for s in 0..tau {
            out -= &self.lw[tau][s] * &real.omega[s];
            out -= &self.lnu[tau][s] * real.nu_at(s + 1);
        }
        Ok(out)
    }

    /// `z̃_{t+1}` for `t` in `0..K`.
    pub fn observation_error(&self, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
        let k = self.sys.horizon() as i64;
        if t < 0 || t > k - 1 {
            return Err(range_error("observation error", t, 0, k - 1));
        }
        real.validate(&self.sys)?;
        let tau = (t + 1) as usize;
        let mut out = &self.hx0[tau] * &real.x0;
        for s in 0..tau {
            out += &self.hw[tau][s] * &real.omega[s];
        }
        for s in 1..=tau {
            out += &self.hnu[tau][s] * real.nu_at(s);
        }
        Ok(out)
    }
}

pub fn lemma1_estimation_error(sys: &LtvSystem, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
    Composites::new(sys).estimation_error(real, t)
}

pub fn lemma2_state_error(sys: &LtvSystem, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
    Composites::new(sys).state_error(real, t)
}

pub fn lemma3_control_error(sys: &LtvSystem, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
    Composites::new(sys).control_error(real, t)
}

pub fn lemma4_observation_error(sys: &LtvSystem, real: &ErrorRealization, t: i64) -> Result<DVector<f64>> {
    Composites::new(sys).observation_error(real, t)
}

/// Stacks a Gaussian as `(mean; upper-triangular covariance entries)`,
/// row by row.
pub fn belief_vector(mean: &DVector<f64>, cov: &DMatrix<f64>) -> DVector<f64> {
    let n = mean.len();
    let mut v = Vec::with_capacity(n + n * (n + 1) / 2);
    v.extend(mean.iter().copied());
    for i in 0..n {
        for j in i..n {
            v.push(cov[(i, j)]);
        }
    }
    DVector::from_vec(v)
}

/// Inverse of [`belief_vector`] for an `n`-dimensional state.
pub fn belief_from_vector(v: &DVector<f64>, n: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    linalg::check_len("belief vector", v, belief_dim(n))?;
    let mean = v.rows(0, n).into_owned();
    let mut cov = DMatrix::zeros(n, n);
    let mut idx = n;
    for i in 0..n {
        for j in i..n {
            cov[(i, j)] = v[idx];
            cov[(j, i)] = v[idx];
            idx += 1;
        }
    }
    Ok((mean, cov))
}

pub fn belief_dim(n: usize) -> usize {
    n + n * (n + 1) / 2
}

/// Linearized belief dynamics `b̃_{t+1} = T^b_t b̃_t + T^u_t ũ_t + T^z_t z̃_{t+1}`
/// for `t = 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefJacobians {
    pub tb: Vec<DMatrix<f64>>,
    pub tu: Vec<DMatrix<f64>>,
    pub tz: Vec<DMatrix<f64>>,
}

impl BeliefJacobians {
    pub fn belief_dim(&self) -> usize {
        self.tb.first().map_or(0, |m| m.nrows())
    }

    pub fn validate(&self, sys: &LtvSystem) -> Result<()> {
        let k = sys.horizon();
        for (name, len) in [("T^b", self.tb.len()), ("T^u", self.tu.len()), ("T^z", self.tz.len())] {
            if len != k {
                return Err(Error::Dimension {
                    context: "BeliefJacobians horizon",
                    expected: format!("{k} matrices"),
                    actual: format!("{len} for {name}"),
                });
            }
        }
        let nb = self.belief_dim();
        for t in 0..k {
            linalg::check_shape("BeliefJacobians T^b", &self.tb[t], nb, nb)?;
            linalg::check_shape("BeliefJacobians T^u", &self.tu[t], nb, sys.control_dim())?;
            linalg::check_shape("BeliefJacobians T^z", &self.tz[t], nb, sys.obs_dim())?;
        }
        Ok(())
    }
}

/// Kalman filter belief map on the stacked belief vector.
fn kf_belief_map(sys: &LtvSystem, t: usize, b: &DVector<f64>, u: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.state_dim();
    let (mean, cov) = belief_from_vector(b, n)?;
    let step = riccati_step(&cov, &sys.a[t], &sys.g[t], sys.h_at(t + 1), sys.m_at(t + 1), &sys.noise)?;
    let predicted = &sys.a[t] * mean + &sys.b[t] * u;
    let innovation = z - sys.h_at(t + 1) * &predicted;
    let next = predicted + &step.k * innovation;
    Ok(belief_vector(&next, &step.p_plus))
}

fn central_difference<F>(f: F, point: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let base = f(point)?;
    let mut jac = DMatrix::zeros(base.len(), point.len());
    for j in 0..point.len() {
        let mut hi = point.clone();
        let mut lo = point.clone();
        hi[j] += step;
        lo[j] -= step;
        let col = (f(&hi)? - f(&lo)?) / (2.0 * step);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Central-difference Jacobians of the Kalman filter belief map along the
/// nominal rollout of `u_nominal` from `x_nominal0`, with measurements equal
/// to their noiseless predictions.
pub fn linear_kf_belief_jacobians(
    sys: &LtvSystem,
    x_nominal0: &DVector<f64>,
    u_nominal: &[DVector<f64>],
    step: f64,
) -> Result<BeliefJacobians> {
    let k = sys.horizon();
    if u_nominal.len() != k {
        return Err(Error::dim("linear_kf_belief_jacobians controls", k, u_nominal.len()));
    }
    linalg::check_len("linear_kf_belief_jacobians x0", x_nominal0, sys.state_dim())?;
    let mut x = x_nominal0.clone();
    let mut tb = Vec::with_capacity(k);
    let mut tu = Vec::with_capacity(k);
    let mut tz = Vec::with_capacity(k);
    for t in 0..k {
        let u = &u_nominal[t];
        linalg::check_len("linear_kf_belief_jacobians control", u, sys.control_dim())?;
        let x_next = &sys.a[t] * &x + &sys.b[t] * u;
        let z = sys.h_at(t + 1) * &x_next;
        let b = belief_vector(&x, &sys.covariances[t]);
        tb.push(central_difference(|v| kf_belief_map(sys, t, v, u, &z), &b, step)?);
        tu.push(central_difference(|v| kf_belief_map(sys, t, &b, v, &z), u, step)?);
        tz.push(central_difference(|v| kf_belief_map(sys, t, &b, u, v), &z, step)?);
        x = x_next;
    }
    Ok(BeliefJacobians { tb, tu, tz })
}

/// `b̃_t` for `t = 0..=K` from the step-by-step linearized belief dynamics.
pub fn recursive_belief_errors(seq: &ErrorSequences, jac: &BeliefJacobians) -> Vec<DVector<f64>> {
    let mut out = vec![DVector::zeros(jac.belief_dim())];
    for t in 0..seq.u_tilde.len() {
        let next = &jac.tb[t] * &out[t] + &jac.tu[t] * &seq.u_tilde[t] + &jac.tz[t] * &seq.z_tilde[t + 1];
        out.push(next);
    }
    out
}

/// Closed-form belief-error sensitivities `T̃^{x₀}_t`, `T̃^ω_{s,t}`, `T̃^ν_{s,t}`.
#[derive(Debug, Clone)]
pub struct BeliefComposites {
    tx0: Vec<DMatrix<f64>>,
    tw: Vec<Vec<DMatrix<f64>>>,
    tnu: Vec<Vec<DMatrix<f64>>>,
}

impl BeliefComposites {
    pub fn new(c: &Composites, jac: &BeliefJacobians) -> Result<Self> {
        let sys = &c.sys;
        jac.validate(sys)?;
        let k = sys.horizon();
        let n = sys.state_dim();
        let nb = jac.belief_dim();
        let tbt = |a: i64, b: i64| ordered_product(&jac.tb, a, b, nb);

        let mut tx0 = vec![DMatrix::zeros(nb, n)];
        let mut tw = table(k + 1, k);
        let mut tnu = table(k + 1, k + 1);
        for t in 1..=k {
            let ti = t as i64;
            let mut x0 = &jac.tz[t - 1] * &c.hx0[t];
            for s in 0..t.saturating_sub(1) {
                let si = s as i64;
                x0 -= tbt(si + 2, ti - 1) * &jac.tu[s + 1] * &c.lx0[s + 1];
                x0 += tbt(si + 1, ti - 1) * &jac.tz[s] * &c.hx0[s + 1];
            }
            tx0.push(x0);
            for s in 0..t {
                let mut acc = &jac.tz[t - 1] * &c.hw[t][s];
                for r in s..t.saturating_sub(1) {
                    let ri = r as i64;
                    acc -= tbt(ri + 2, ti - 1) * &jac.tu[r + 1] * &c.lw[r + 1][s];
                    acc += tbt(ri + 1, ti - 1) * &jac.tz[r] * &c.hw[r + 1][s];
                }
                tw[t][s] = acc;
            }
            for s in 1..=t {
                let mut acc = &jac.tz[t - 1] * &c.hnu[t][s];
                for r in s - 1..t.saturating_sub(1) {
                    let ri = r as i64;
                    acc -= tbt(ri + 2, ti - 1) * &jac.tu[r + 1] * &c.lnu[r + 1][s - 1];
                    acc += tbt(ri + 1, ti - 1) * &jac.tz[r] * &c.hnu[r + 1][s];
                }
                tnu[t][s] = acc;
            }
        }
        Ok(Self { tx0, tw, tnu })
    }

    /// `b̃_t` for `t` in `0..=K`.
    pub fn belief_error(&self, real: &ErrorRealization, t: usize) -> Result<DVector<f64>> {
        let k = self.tx0.len() - 1;
        if t > k {
            return Err(range_error("belief error", t as i64, 0, k as i64));
        }
        let mut out = &self.tx0[t] * &real.x0;
        for s in 0..t {
            out += &self.tw[t][s] * &real.omega[s];
        }
        for s in 1..=t {
            out += &self.tnu[t][s] * real.nu_at(s);
        }
        Ok(out)
    }
}

pub fn lemma5_belief_error(sys: &LtvSystem, real: &ErrorRealization, t: usize, jac: &BeliefJacobians) -> Result<DVector<f64>> {
    real.validate(sys)?;
    BeliefComposites::new(&Composites::new(sys), jac)?.belief_error(real, t)
}

/// Linearized stage costs: row vectors `C^b_t` (`t = 0..=K`) and `C^u_t`
/// (`t = 0..K`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostJacobians {
    pub cb: Vec<DMatrix<f64>>,
    pub cu: Vec<DMatrix<f64>>,
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub samples: usize,
}

impl MonteCarloEstimate {
    fn from_samples(values: impl Iterator<Item = f64>) -> Self {
        // Welford keeps the variance accurate when the mean dominates.
        let (mut count, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in values {
            count += 1;
            let delta = x - mean;
            mean += delta / count as f64;
            m2 += delta * (x - mean);
        }
        let var = if count > 1 { m2 / (count - 1) as f64 } else { 0.0 };
        Self {
            mean,
            standard_error: (var / count.max(1) as f64).sqrt(),
            samples: count,
        }
    }

    /// `|mean| ≤ z · standard_error`.
    pub fn within(&self, z: f64) -> bool {
        self.mean.abs() <= z * self.standard_error
    }
}

/// Monte-Carlo mean of the first-order cost error
/// `J̃ = Σ_{t<K} (C^b_t b̃_t + C^u_t ũ_t) + C^b_K b̃_K` with zero-mean `x̃₀`.
pub fn theorem1_cost_error_check(
    sys: &LtvSystem,
    jac: &BeliefJacobians,
    costs: &CostJacobians,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    cost_error_estimate(sys, jac, costs, samples, seed, None)
}

/// As [`theorem1_cost_error_check`] with a deterministic offset added to
/// every `x̃₀`. A nonzero offset biases the mean, which is what the negative
/// control looks for.
pub fn cost_error_with_bias(
    sys: &LtvSystem,
    jac: &BeliefJacobians,
    costs: &CostJacobians,
    samples: usize,
    seed: u64,
    bias: &DVector<f64>,
) -> Result<MonteCarloEstimate> {
    linalg::check_len("cost_error_with_bias bias", bias, sys.state_dim())?;
    cost_error_estimate(sys, jac, costs, samples, seed, Some(bias))
}

fn cost_error_estimate(
    sys: &LtvSystem,
    jac: &BeliefJacobians,
    costs: &CostJacobians,
    samples: usize,
    seed: u64,
    bias: Option<&DVector<f64>>,
) -> Result<MonteCarloEstimate> {
    if samples == 0 {
        return Err(Error::Input("cost error check needs at least one sample".into()));
    }
    let k = sys.horizon();
    if costs.cb.len() != k + 1 || costs.cu.len() != k {
        return Err(Error::Dimension {
            context: "CostJacobians horizon",
            expected: format!("{} belief and {k} control rows", k + 1),
            actual: format!("{} and {}", costs.cb.len(), costs.cu.len()),
        });
    }
    let c = Composites::new(sys);
    let bc = BeliefComposites::new(&c, jac)?;
    let nb = jac.belief_dim();
    for row in &costs.cb {
        linalg::check_shape("C^b", row, 1, nb)?;
    }
    for row in &costs.cu {
        linalg::check_shape("C^u", row, 1, sys.control_dim())?;
    }

    // J̃ is linear in (x̃₀, ω, ν), so collapse it to one row per input.
    let n = sys.state_dim();
    let nw = sys.noise.sigma_omega.nrows();
    let nv = sys.noise.sigma_nu.nrows();
    let mut cx0 = DMatrix::zeros(1, n);
    let mut cw = vec![DMatrix::zeros(1, nw); k];
    let mut cv = vec![DMatrix::zeros(1, nv); k + 1];
    for t in 0..=k {
        cx0 += &costs.cb[t] * &bc.tx0[t];
        for s in 0..t {
            cw[s] += &costs.cb[t] * &bc.tw[t][s];
        }
        for s in 1..=t {
            cv[s] += &costs.cb[t] * &bc.tnu[t][s];
        }
    }
    for t in 0..k {
        cx0 -= &costs.cu[t] * &c.lx0[t];
        for s in 0..t {
            cw[s] -= &costs.cu[t] * &c.lw[t][s];
            cv[s + 1] -= &costs.cu[t] * &c.lnu[t][s];
        }
    }

    let factors = NoiseFactors::new(sys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..samples).map(|_| {
        let real = factors.draw(&mut rng, bias);
        let mut j = (&cx0 * &real.x0)[0];
        for s in 0..k {
            j += (&cw[s] * &real.omega[s])[0];
            j += (&cv[s + 1] * real.nu_at(s + 1))[0];
        }
        j
    });
    Ok(MonteCarloEstimate::from_samples(values))
}

/// Simulated estimation cost against its trace form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceIdentity {
    /// Monte-Carlo `E[Σ_{t=1..K} x̌_tᵀ W^x_t x̌_t]`.
    pub simulated: MonteCarloEstimate,
    /// `Σ_{t=1..K} tr(W_t P⁺_t W_tᵀ)`.
    pub predicted: f64,
}

impl TraceIdentity {
    /// Distance between simulation and prediction in standard errors.
    pub fn z_score(&self) -> f64 {
        let diff = (self.simulated.mean - self.predicted).abs();
        if self.simulated.standard_error > 0.0 {
            diff / self.simulated.standard_error
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Runs the closed loop `samples` times and compares the quadratic estimation
/// cost with the covariance trace it should equal in expectation.
pub fn trace_identity_check(sys: &LtvSystem, weights: &CostWeights, samples: usize, seed: u64) -> Result<TraceIdentity> {
    let k = sys.horizon();
    if weights.horizon() != k {
        return Err(Error::dim("trace_identity_check weights", k, weights.horizon()));
    }
    if samples == 0 {
        return Err(Error::Input("trace identity check needs at least one sample".into()));
    }
    let predicted = (1..=k).map(|t| weights.state_cost(t, &sys.covariances[t])).sum();
    let factors = NoiseFactors::new(sys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let seq = recursive_errors(sys, &factors.draw(&mut rng, None))?;
        let cost: f64 = (1..=k)
            .map(|t| {
                let e = &seq.x_check[t];
                (e.transpose() * weights.wx(t) * e)[0]
            })
            .sum();
        values.push(cost);
    }
    Ok(TraceIdentity {
        simulated: MonteCarloEstimate::from_samples(values.into_iter()),
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar_system(k: usize) -> LtvSystem {
        let noise = NoiseSpec::new(s(0.5), s(0.3)).unwrap();
        let w = CostWeights::uniform(k, s(1.0), s(1.0)).unwrap();
        LtvSystem::new(
            vec![s(1.1); k],
            vec![s(0.7); k],
            vec![s(1.0); k],
            vec![s(0.9); k],
            vec![s(1.0); k],
            noise,
            &w,
            s(0.4),
        )
        .unwrap()
    }

    fn random_pair(seed: u64) -> (LtvSystem, ErrorRealization) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = LtvSystem::random(2, 1, 2, 5, &mut rng).unwrap();
        let real = ErrorRealization::sample(&sys, &mut rng);
        (sys, real)
    }

    #[test]
    fn empty_products_are_identity() {
        let mats = vec![s(2.0), s(3.0), s(5.0)];
        assert_eq!(ordered_product(&mats, 0, -1, 1), s(1.0));
        assert_eq!(ordered_product(&mats, 2, 1, 1), s(1.0));
        assert_eq!(ordered_product(&mats, 0, 2, 1), s(30.0));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(ordered_product(&[a.clone(), b.clone()], 0, 1, 2), &b * &a);
    }

    #[test]
    fn zero_inputs_give_zero_errors() {
        let sys = scalar_system(4);
        let seq = recursive_errors(&sys, &ErrorRealization::zero(&sys)).unwrap();
        for x in seq.x_tilde.iter().chain(&seq.x_check).chain(&seq.u_tilde).chain(&seq.z_tilde) {
            assert_eq!(x[0], 0.0);
        }
    }

    #[test]
    fn first_control_error_vanishes() {
        let (sys, real) = random_pair(3);
        let seq = recursive_errors(&sys, &real).unwrap();
        assert!(seq.u_tilde[0].iter().all(|&u| u == 0.0));
        assert_eq!(lemma3_control_error(&sys, &real, -1).unwrap(), DVector::zeros(1));
    }

    #[test]
    fn one_step_state_error() {
        let sys = scalar_system(1);
        let real = ErrorRealization { x0: v(0.3), omega: vec![v(-0.2)], nu: vec![v(0.5)] };
        let seq = recursive_errors(&sys, &real).unwrap();
        let expected = 1.1 * 0.3 + 1.0 * -0.2;
        assert!((seq.x_tilde[1][0] - expected).abs() < 1e-15);
        assert!((lemma2_state_error(&sys, &real, 0).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn base_cases() {
        let (sys, real) = random_pair(5);
        let c = Composites::new(&sys);
        assert_eq!(c.estimation_error(&real, -1).unwrap(), real.x0);
        assert_eq!(c.state_error(&real, -1).unwrap(), real.x0);
        assert!(c.observation_error(&real, -1).is_err());
        assert!(c.state_error(&real, 5).is_err());
        assert!(c.control_error(&real, 4).is_err());
    }

    #[test]
    fn noise_free_estimation_error() {
        let (sys, mut real) = random_pair(9);
        let zero = ErrorRealization::zero(&sys);
        real.omega = zero.omega;
        real.nu = zero.nu;
        let c = Composites::new(&sys);
        for t in 0..5 {
            let expected = c.f_product(0, t) * &real.x0;
            assert!((c.estimation_error(&real, t).unwrap() - expected).amax() < 1e-14);
            let u = c.control_error(&real, t.min(3)).unwrap();
            let expected_u = -(&c.lx0[(t.min(3) + 1) as usize] * &real.x0);
            assert!((u - expected_u).amax() < 1e-14);
        }
    }

    #[test]
    fn single_noise_observation_terms() {
        let (sys, _) = random_pair(11);
        let c = Composites::new(&sys);
        let mut real = ErrorRealization::zero(&sys);
        real.nu[2] = DVector::from_vec(vec![0.4, -1.2]);
        let z = c.observation_error(&real, 2).unwrap();
        assert!((z - sys.m_at(3) * real.nu_at(3)).amax() < 1e-14);

        let mut real = ErrorRealization::zero(&sys);
        real.x0 = DVector::from_vec(vec![0.7, 0.1]);
        let z = c.observation_error(&real, 3).unwrap();
        let expected = sys.h_at(4) * &c.dx0[4] * &real.x0;
        assert!((z - expected).amax() < 1e-14);
    }

    #[test]
    fn closed_forms_match_recursion() {
        for seed in 0..10 {
            let (sys, real) = random_pair(seed);
            let c = Composites::new(&sys);
            let seq = recursive_errors(&sys, &real).unwrap();
            for t in -1..5i64 {
                let i = (t + 1) as usize;
                assert!((c.estimation_error(&real, t).unwrap() - &seq.x_check[i]).amax() < 1e-10);
                assert!((c.state_error(&real, t).unwrap() - &seq.x_tilde[i]).amax() < 1e-10);
                if t <= 3 {
                    assert!((c.control_error(&real, t).unwrap() - &seq.u_tilde[i]).amax() < 1e-10);
                }
                if t >= 0 {
                    assert!((c.observation_error(&real, t).unwrap() - &seq.z_tilde[i]).amax() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn belief_vector_round_trip() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 4.0]);
        let b = belief_vector(&mean, &cov);
        assert_eq!(b.as_slice(), &[1.0, 2.0, 3.0, 0.5, 4.0]);
        assert_eq!(belief_from_vector(&b, 2).unwrap(), (mean, cov));
    }

    #[test]
    fn belief_closed_form_matches_recursion() {
        let sys = scalar_system(3);
        let jac = linear_kf_belief_jacobians(&sys, &v(0.2), &[v(0.5), v(-0.3), v(0.1)], 1e-6).unwrap();
        let bc = BeliefComposites::new(&Composites::new(&sys), &jac).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let real = ErrorRealization::sample(&sys, &mut rng);
            let seq = recursive_errors(&sys, &real).unwrap();
            let rec = recursive_belief_errors(&seq, &jac);
            assert_eq!(bc.belief_error(&real, 0).unwrap(), DVector::zeros(2));
            for t in 0..=3 {
                assert!((bc.belief_error(&real, t).unwrap() - &rec[t]).amax() < 1e-8);
                // The mean part of the belief error is x̂ − x^p = x̃ − x̌.
                let mean_err = &seq.x_tilde[t] - &seq.x_check[t];
                assert!((rec[t][0] - mean_err[0]).abs() < 1e-6);
                assert!(rec[t][1].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_shapes_are_checked() {
        let sys = scalar_system(3);
        let mut jac = linear_kf_belief_jacobians(&sys, &v(0.0), &[v(0.0), v(0.0), v(0.0)], 1e-6).unwrap();
        jac.tz[1] = DMatrix::zeros(3, 1);
        assert!(matches!(
            lemma5_belief_error(&sys, &ErrorRealization::zero(&sys), 2, &jac),
            Err(Error::Dimension { .. })
        ));
    }

    fn scalar_costs(k: usize, cb: f64, cu: f64) -> CostJacobians {
        CostJacobians {
            cb: vec![DMatrix::from_row_slice(1, 2, &[cb, 0.5 * cb]); k + 1],
            cu: vec![s(cu); k],
        }
    }

    #[test]
    fn zero_costs_give_exact_zero() {
        let sys = scalar_system(3);
        let jac = linear_kf_belief_jacobians(&sys, &v(0.0), &[v(0.0), v(0.0), v(0.0)], 1e-6).unwrap();
        let est = theorem1_cost_error_check(&sys, &jac, &scalar_costs(3, 0.0, 0.0), 100, 0).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.standard_error, 0.0);
    }

    #[test]
    fn bias_is_detected() {
        let sys = scalar_system(3);
        let jac = linear_kf_belief_jacobians(&sys, &v(0.0), &[v(0.0), v(0.0), v(0.0)], 1e-6).unwrap();
        let costs = scalar_costs(3, 1.0, 0.5);
        let clean = theorem1_cost_error_check(&sys, &jac, &costs, 20_000, 4).unwrap();
        assert!(clean.within(4.0), "{clean:?}");
        let biased = cost_error_with_bias(&sys, &jac, &costs, 20_000, 4, &v(1.0)).unwrap();
        assert!(!biased.within(4.0), "{biased:?}");
    }

    #[test]
    fn trace_identity_scalar() {
        let sys = scalar_system(4);
        let w = CostWeights::uniform(4, s(2.0), s(1.0)).unwrap();
        let check = trace_identity_check(&sys, &w, 20_000, 7).unwrap();
        assert!(check.z_score() < 4.0, "{check:?}");
    }
}
