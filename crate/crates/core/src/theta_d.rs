//! Finite-time theta-D suboptimal control.
//!
//! For dynamics `x' = (A0 + A(x)) x + (B0 + B(x)) u` and the quadratic cost
//! with penalties `(Q, R, S)`, the gradient of the cost-to-go is expanded as
//! `(T0(t) + theta T1(x) + theta^2 T2(x)) x`.
//!
//! * `T0` solves the differential Riccati equation of the constant pair
//!   `(A0, B0)` backwards from `T0(tf) = S`. This is done offline.
//! * `T1`, `T2` solve Lyapunov equations in the closed-loop matrix
//!   `A0 - B0 R^-1 B0^T T0(t)`, whose right-hand sides are damped by
//!   `rho_i(t) = 1 - p_i exp(-q_i t)`. The Kronecker operators of these
//!   equations are inverted once per schedule knot, so the online work is
//!   matrix products only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm beyond which backward Riccati integration is declared divergent.
pub const RICCATI_DIVERGENCE_BOUND: f64 = 1e12;
/// Upper bound on RK4 substeps per knot interval.
const MAX_SUBSTEPS: usize = 1 << 20;
/// Relative pivot size below which a Kronecker operator is treated as singular.
const SINGULAR_PIVOT: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaDConfig {
    /// Perturbation amplitudes `p_1, p_2`.
    pub p: [f64; 2],
    /// Perturbation decay rates `q_1, q_2`, 1/s.
    pub q: [f64; 2],
    pub theta: f64,
}

impl Default for ThetaDConfig {
    fn default() -> Self {
        ThetaDConfig {
            p: [0.9, 0.99],
            q: [10.0, 100.0],
            theta: 1.0,
        }
    }
}

impl ThetaDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("theta-D p_i must lie in [0, 1]".into()));
        }
        if self.q.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::InvalidParameter("theta-D q_i must be non-negative".into()));
        }
        if !(self.theta > 0.0) {
            return Err(Error::InvalidParameter("theta must be positive".into()));
        }
        Ok(())
    }
}

/// `rho_i(t) = 1 - p_i exp(-q_i t)` for `i` in {1, 2}.
pub fn rho(i: usize, t: f64, cfg: &ThetaDConfig) -> f64 {
    assert!((1..=2).contains(&i), "series index {i} out of range");
    1.0 - cfg.p[i - 1] * (-cfg.q[i - 1] * t).exp()
}

/// Backward Riccati solution `T0` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub t_start: f64,
    pub t_final: f64,
    pub step: f64,
    pub a0: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub knots: Vec<DMatrix<f64>>,
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!("{name} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Number of uniform intervals of length `step` spanning `span`.
pub(crate) fn grid_intervals(span: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) || !(span > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon {span} and step {step} must be positive")));
    }
    let n = (span / step).round();
    if (n * step - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::InvalidParameter(format!("horizon {span} is not a multiple of step {step}")));
    }
    Ok(n as usize)
}

/// Riccati right-hand side `T A + A^T T - T G T + Q`, i.e. `-dT/dt`.
fn riccati_rhs(t: &DMatrix<f64>, a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    t * a + a.transpose() * t - t * g * t + q
}

fn rk4_riccati(t: &DMatrix<f64>, a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let k1 = riccati_rhs(t, a, g, q);
    let k2 = riccati_rhs(&(t + &k1 * (h / 2.0)), a, g, q);
    let k3 = riccati_rhs(&(t + &k2 * (h / 2.0)), a, g, q);
    let k4 = riccati_rhs(&(t + &k3 * h), a, g, q);
    symmetrize(&(t + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)))
}

/// Largest `h_sub * 2 |A0 - G T|` allowed for one RK4 substep.
const STIFF_STEP: f64 = 0.1;

/// Integrates `-T' = T A0 + A0^T T - T B0 R^-1 B0^T T + Q`, `T(tf) = S`
/// backwards with RK4 on a grid of spacing `step` over `[0, tf]`.
///
/// Intervals where the equation is stiff are covered by several RK4
/// substeps; only the knots are stored.
pub fn solve_t0(
    a0: &DMatrix<f64>,
    b0: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    t_final: f64,
    step: f64,
) -> Result<GainSchedule> {
    let n = a0.nrows();
    let m = b0.ncols();
    check_square("A0", a0, n)?;
    check_square("Q", q, n)?;
    check_square("S", s, n)?;
    check_square("R", r, m)?;
    if b0.nrows() != n {
        return Err(Error::Dimension(format!("B0 must have {n} rows")));
    }
    let r_chol = r.clone().cholesky().ok_or_else(|| Error::InvalidParameter("R must be positive definite".into()))?;
    let intervals = grid_intervals(t_final, step)?;
    let g = b0 * r_chol.inverse() * b0.transpose();

    let mut knots = Vec::with_capacity(intervals + 1);
    let mut current = symmetrize(s);
    knots.push(s.clone());
    for k in (0..intervals).rev() {
        // Large S with strong actuation makes the equation stiff near tf.
        // The linearised flow has eigenvalues l_i + l_j of A0 - G T, so the
        // interval is split until h_sub * 2 |A0 - G T| <= STIFF_STEP.
        let stiffness = 2.0 * (a0 - &g * &current).norm();
        let substeps = ((step * stiffness / STIFF_STEP).ceil() as usize).clamp(1, MAX_SUBSTEPS);
        let hs = step / substeps as f64;
        for _ in 0..substeps {
            current = rk4_riccati(&current, a0, &g, q, hs);
        }
        let norm = current.norm();
        if !norm.is_finite() || norm > RICCATI_DIVERGENCE_BOUND {
            return Err(Error::RiccatiDivergence { time: k as f64 * step });
        }
        knots.push(current.clone());
    }
    knots.reverse();
    Ok(GainSchedule {
        t_start: 0.0,
        t_final,
        step,
        a0: a0.clone(),
        b0: b0.clone(),
        q: q.clone(),
        r: r.clone(),
        s: s.clone(),
        knots,
    })
}

impl GainSchedule {
    pub fn state_dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b0.ncols()
    }

    /// Index of the knot at `t`, if `t` lies on the grid.
    pub fn knot_index(&self, t: f64) -> Option<usize> {
        let s = (t - self.t_start) / self.step;
        let k = s.round();
        if (s - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < self.knots.len() {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Linear interpolation of `T0`; exact at knots.
    pub fn interpolate(&self, t: f64) -> Result<DMatrix<f64>> {
        let slack = 1e-9 * self.step;
        if !(t >= self.t_start - slack && t <= self.t_final + slack) {
            return Err(Error::OutOfRange { t, start: self.t_start, end: self.t_final });
        }
        if let Some(k) = self.knot_index(t) {
            return Ok(self.knots[k].clone());
        }
        let s = (t - self.t_start) / self.step;
        let i = (s.floor() as usize).min(self.knots.len() - 2);
        let f = s - i as f64;
        Ok(&self.knots[i] * (1.0 - f) + &self.knots[i + 1] * f)
    }

    /// Finite-horizon LQR gain `R^-1 B0^T T0(t)`.
    pub fn lqr_gain(&self, t: f64) -> Result<DMatrix<f64>> {
        let r_inv = self.r.clone().try_inverse().ok_or(Error::Singular("R"))?;
        Ok(r_inv * self.b0.transpose() * self.interpolate(t)?)
    }

    /// Riccati residual at knot `k`, with the derivative taken by central
    /// differences of neighbouring knots (one-sided at the ends).
    pub fn riccati_residual(&self, k: usize) -> f64 {
        let last = self.knots.len() - 1;
        let deriv = if k == 0 {
            (&self.knots[1] - &self.knots[0]) / self.step
        } else if k == last {
            (&self.knots[last] - &self.knots[last - 1]) / self.step
        } else {
            (&self.knots[k + 1] - &self.knots[k - 1]) / (2.0 * self.step)
        };
        let r_inv = self.r.clone().try_inverse().expect("validated R");
        let g = &self.b0 * r_inv * self.b0.transpose();
        (riccati_rhs(&self.knots[k], &self.a0, &g, &self.q) + deriv).norm()
    }
}

/// Kronecker operator of `T A + A^T T` acting on column-major `vec(T)`:
/// `A^T (x) I + I (x) A^T`.
pub fn lyapunov_operator(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut op = DMatrix::zeros(n * n, n * n);
    for j in 0..n {
        for i in 0..n {
            let row = i + n * j;
            // (T A)_ij = sum_k T_ik A_kj
            for k in 0..n {
                op[(row, i + n * k)] += a[(k, j)];
            }
            // (A^T T)_ij = sum_k A_ki T_kj
            for k in 0..n {
                op[(row, k + n * j)] += a[(k, i)];
            }
        }
    }
    op
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

fn factor_operator(a: &DMatrix<f64>) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = lyapunov_operator(a).lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let max = diag.max();
    if !(diag.min() > SINGULAR_PIVOT * max.max(1.0)) {
        return Err(Error::Singular("Lyapunov operator"));
    }
    Ok(lu)
}

/// Solves `T A + A^T T = rhs`. The result is symmetrised when `rhs` is symmetric.
pub fn solve_lyapunov(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check_square("closed-loop matrix", a, n)?;
    check_square("Lyapunov right-hand side", rhs, n)?;
    let lu = factor_operator(a)?;
    let sol = lu.solve(&vec_of(rhs)).ok_or(Error::Singular("Lyapunov operator"))?;
    let t = unvec(&sol, n);
    if (rhs - rhs.transpose()).norm() <= 1e-12 * rhs.norm().max(1.0) {
        Ok(symmetrize(&t))
    } else {
        Ok(t)
    }
}

/// Least-squares minimum-norm solution of `T A + A^T T = rhs`, for operators
/// that are singular (for instance a closed loop with zero eigenvalues at the
/// terminal knot).
pub fn solve_lyapunov_min_norm(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check_square("closed-loop matrix", a, n)?;
    check_square("Lyapunov right-hand side", rhs, n)?;
    let pinv = pseudo_inverse_operator(a)?;
    Ok(symmetrize(&unvec(&(pinv * vec_of(rhs)), n)))
}

fn pseudo_inverse_operator(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let op = lyapunov_operator(a);
    let svd = op.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    svd.pseudo_inverse(eps).map_err(|e| Error::Singular(if e.is_empty() { "Lyapunov operator" } else { "Lyapunov pseudo-inverse" }))
}

/// `||T A + A^T T - rhs|| / max(||rhs||, tiny)`
pub fn lyapunov_residual(a: &DMatrix<f64>, t: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    let res = (t * a + a.transpose() * t - rhs).norm();
    res / rhs.norm().max(f64::MIN_POSITIVE)
}

/// Shared constant products of the online phase.
#[derive(Debug, Clone)]
pub struct SeriesContext {
    pub b0: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
    /// `B0 R^-1 B0^T`
    pub g0: DMatrix<f64>,
    pub theta: f64,
}

impl SeriesContext {
    pub fn new(b0: &DMatrix<f64>, r: &DMatrix<f64>, theta: f64) -> Result<Self> {
        let r_inv = r.clone().try_inverse().ok_or(Error::Singular("R"))?;
        Ok(SeriesContext {
            g0: b0 * &r_inv * b0.transpose(),
            b0: b0.clone(),
            r_inv,
            theta,
        })
    }
}

/// Unperturbed right-hand side of the order-`i` Lyapunov equation (`i >= 1`),
/// given `terms = [T_0, ..., T_{i-1}]` and the state-dependent parts
/// `a_x = A(x)`, `b_x = B(x)`:
///
/// ```text
/// -(T_{i-1} A + A^T T_{i-1})/theta
///   + sum_{j=0}^{i-1} T_j (B0 R^-1 B^T + B R^-1 B0^T)/theta T_{i-1-j}
///   + sum_{j=0}^{i-2} T_j B R^-1 B^T/theta^2 T_{i-2-j}
///   + sum_{j=1}^{i-1} T_j B0 R^-1 B0^T T_{i-j}
/// ```
pub fn series_rhs(i: usize, terms: &[DMatrix<f64>], a_x: &DMatrix<f64>, b_x: &DMatrix<f64>, ctx: &SeriesContext) -> DMatrix<f64> {
    assert!(i >= 1 && terms.len() >= i, "need T_0..T_{{i-1}} for order {i}");
    let th = ctx.theta;
    let a_s = a_x / th;
    let b_s = b_x / th;
    let cross = &ctx.b0 * &ctx.r_inv * b_s.transpose() + &b_s * &ctx.r_inv * ctx.b0.transpose();
    let quad = &b_s * &ctx.r_inv * b_s.transpose();

    let prev = &terms[i - 1];
    let mut rhs = -(prev * &a_s) - a_s.transpose() * prev;
    for j in 0..i {
        rhs += &terms[j] * &cross * &terms[i - 1 - j];
    }
    for j in 0..i.saturating_sub(1) {
        rhs += &terms[j] * &quad * &terms[i - 2 - j];
    }
    for j in 1..i {
        rhs += &terms[j] * &ctx.g0 * &terms[i - j];
    }
    rhs
}

/// Order-1 term: solves the Lyapunov equation with right-hand side
/// `rho_1(t)` times the unperturbed bracket.
pub fn build_t1(
    t0: &DMatrix<f64>,
    a_cl: &DMatrix<f64>,
    a_x: &DMatrix<f64>,
    b_x: &DMatrix<f64>,
    t: f64,
    ctx: &SeriesContext,
    cfg: &ThetaDConfig,
) -> Result<DMatrix<f64>> {
    let rhs = series_rhs(1, std::slice::from_ref(t0), a_x, b_x, ctx) * rho(1, t, cfg);
    solve_lyapunov(a_cl, &rhs)
}

#[allow(clippy::too_many_arguments)]
pub fn build_t2(
    t0: &DMatrix<f64>,
    t1: &DMatrix<f64>,
    a_cl: &DMatrix<f64>,
    a_x: &DMatrix<f64>,
    b_x: &DMatrix<f64>,
    t: f64,
    ctx: &SeriesContext,
    cfg: &ThetaDConfig,
) -> Result<DMatrix<f64>> {
    let rhs = series_rhs(2, &[t0.clone(), t1.clone()], a_x, b_x, ctx) * rho(2, t, cfg);
    solve_lyapunov(a_cl, &rhs)
}

/// The three retained series terms and the unperturbed brackets they came from.
#[derive(Debug, Clone)]
pub struct SeriesTerms {
    pub t0: DMatrix<f64>,
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub bracket1: DMatrix<f64>,
    pub bracket2: DMatrix<f64>,
}

/// Inverse Kronecker operators, one per schedule knot.
#[derive(Debug, Clone)]
pub struct KroneckerCache {
    /// Inverse operator per knot, or the pseudo-inverse where it is singular.
    inverses: Vec<DMatrix<f64>>,
    singular: Vec<bool>,
}

impl KroneckerCache {
    fn closed_loop(schedule: &GainSchedule, g0: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        &schedule.a0 - g0 * &schedule.knots[k]
    }

    fn invert(a_cl: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
        let n = a_cl.nrows();
        match factor_operator(a_cl).ok().and_then(|lu| lu.solve(&DMatrix::identity(n * n, n * n))) {
            Some(inv) => Ok((inv, false)),
            None => Ok((pseudo_inverse_operator(a_cl)?, true)),
        }
    }

    fn from_entries(entries: Vec<(DMatrix<f64>, bool)>) -> Self {
        let (inverses, singular) = entries.into_iter().unzip();
        KroneckerCache { inverses, singular }
    }

    pub fn build_seq(schedule: &GainSchedule, g0: &DMatrix<f64>) -> Result<Self> {
        let entries = (0..schedule.knots.len())
            .map(|k| Self::invert(&Self::closed_loop(schedule, g0, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(entries))
    }

    #[cfg(feature = "parallel")]
    pub fn build_par(schedule: &GainSchedule, g0: &DMatrix<f64>) -> Result<Self> {
        use rayon::prelude::*;
        let entries = (0..schedule.knots.len())
            .into_par_iter()
            .map(|k| Self::invert(&Self::closed_loop(schedule, g0, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(entries))
    }

    pub fn build(schedule: &GainSchedule, g0: &DMatrix<f64>) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            Self::build_par(schedule, g0)
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self::build_seq(schedule, g0)
        }
    }

    pub fn len(&self) -> usize {
        self.inverses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverses.is_empty()
    }

    /// Number of knots holding a pseudo-inverse.
    pub fn singular_knots(&self) -> usize {
        self.singular.iter().filter(|s| **s).count()
    }
}

/// Online theta-D feedback over an offline `T0` schedule.
#[derive(Debug, Clone)]
pub struct ThetaDController {
    pub schedule: GainSchedule,
    pub cfg: ThetaDConfig,
    ctx: SeriesContext,
    cache: Option<KroneckerCache>,
}

impl ThetaDController {
    /// Builds the controller and, when `prefactor` is set, the per-knot
    /// inverse Kronecker operators.
    ///
    /// Where the closed-loop Lyapunov operator is singular the online terms
    /// use the minimum-norm least-squares solution.
    pub fn new(schedule: GainSchedule, cfg: ThetaDConfig, prefactor: bool) -> Result<Self> {
        cfg.validate()?;
        let ctx = SeriesContext::new(&schedule.b0, &schedule.r, cfg.theta)?;
        let cache = if prefactor {
            Some(KroneckerCache::build(&schedule, &ctx.g0)?)
        } else {
            None
        };
        Ok(ThetaDController { schedule, cfg, ctx, cache })
    }

    pub fn cache(&self) -> Option<&KroneckerCache> {
        self.cache.as_ref()
    }

    pub fn context(&self) -> &SeriesContext {
        &self.ctx
    }

    fn lyapunov(&self, knot: Option<usize>, a_cl: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match (knot, &self.cache) {
            (Some(k), Some(cache)) => Ok(symmetrize(&unvec(&(&cache.inverses[k] * vec_of(rhs)), a_cl.nrows()))),
            _ => match solve_lyapunov(a_cl, rhs) {
                Err(Error::Singular(_)) => solve_lyapunov_min_norm(a_cl, rhs),
                other => other,
            },
        }
    }

    /// Evaluates `T0(t)`, `T1(x)`, `T2(x)` for the state-dependent parts `a_x`, `b_x`.
    pub fn series_terms(&self, a_x: &DMatrix<f64>, b_x: &DMatrix<f64>, t: f64) -> Result<SeriesTerms> {
        let knot = self.schedule.knot_index(t);
        let t0 = self.schedule.interpolate(t)?;
        let a_cl = &self.schedule.a0 - &self.ctx.g0 * &t0;

        let bracket1 = series_rhs(1, std::slice::from_ref(&t0), a_x, b_x, &self.ctx);
        let t1 = self.lyapunov(knot, &a_cl, &(&bracket1 * rho(1, t, &self.cfg)))?;
        let pair = [t0, t1];
        let bracket2 = series_rhs(2, &pair, a_x, b_x, &self.ctx);
        let t2 = self.lyapunov(knot, &a_cl, &(&bracket2 * rho(2, t, &self.cfg)))?;
        let [t0, t1] = pair;
        Ok(SeriesTerms { t0, t1, t2, a_cl, bracket1, bracket2 })
    }

    /// Combined cost-gradient matrix `T0 + theta T1 + theta^2 T2`.
    pub fn value_matrix(&self, terms: &SeriesTerms) -> DMatrix<f64> {
        let th = self.cfg.theta;
        &terms.t0 + &terms.t1 * th + &terms.t2 * (th * th)
    }

    /// `u = -R^-1 (B0 + B(x))^T (T0 + theta T1 + theta^2 T2) z`, where `z` is
    /// the state or a caller-supplied error vector.
    pub fn control(&self, a_x: &DMatrix<f64>, b_x: &DMatrix<f64>, t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        let terms = self.series_terms(a_x, b_x, t)?;
        Ok(self.control_from_terms(&terms, b_x, z))
    }

    pub fn control_from_terms(&self, terms: &SeriesTerms, b_x: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
        let g = &self.ctx.b0 + b_x;
        -(&self.ctx.r_inv * g.transpose() * (self.value_matrix(terms) * z))
    }

    /// Feedback gain `R^-1 g^T (T0 + theta T1 + theta^2 T2)`.
    pub fn gain(&self, a_x: &DMatrix<f64>, b_x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        let terms = self.series_terms(a_x, b_x, t)?;
        let g = &self.ctx.b0 + b_x;
        Ok(&self.ctx.r_inv * g.transpose() * self.value_matrix(&terms))
    }

    /// Smallest eigenvalue of the perturbed state penalty
    /// `Q + theta D1 + theta^2 D2`, with `D_i = p_i exp(-q_i t)` times bracket `i`.
    pub fn perturbed_penalty_min_eig(&self, terms: &SeriesTerms, t: f64) -> f64 {
        let th = self.cfg.theta;
        let d1 = &terms.bracket1 * (1.0 - rho(1, t, &self.cfg));
        let d2 = &terms.bracket2 * (1.0 - rho(2, t, &self.cfg));
        let m = symmetrize(&(&self.schedule.q + d1 * th + d2 * (th * th)));
        m.symmetric_eigenvalues().min()
    }
}

/// File layout of a serialised schedule: grid metadata plus row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainScheduleFile {
    pub state_dim: usize,
    pub input_dim: usize,
    pub t_start: f64,
    pub t_final: f64,
    pub step: f64,
    pub a0: Vec<f64>,
    pub b0: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub knots: Vec<Vec<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], name: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!("{name}: expected {} entries, got {}", rows * cols, data.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl From<&GainSchedule> for GainScheduleFile {
    fn from(s: &GainSchedule) -> Self {
        GainScheduleFile {
            state_dim: s.state_dim(),
            input_dim: s.input_dim(),
            t_start: s.t_start,
            t_final: s.t_final,
            step: s.step,
            a0: row_major(&s.a0),
            b0: row_major(&s.b0),
            q: row_major(&s.q),
            r: row_major(&s.r),
            s: row_major(&s.s),
            knots: s.knots.iter().map(row_major).collect(),
        }
    }
}

impl TryFrom<GainScheduleFile> for GainSchedule {
    type Error = Error;

    fn try_from(f: GainScheduleFile) -> Result<Self> {
        let (n, m) = (f.state_dim, f.input_dim);
        let intervals = grid_intervals(f.t_final - f.t_start, f.step)?;
        if f.knots.len() != intervals + 1 {
            return Err(Error::Dimension(format!("expected {} knots, got {}", intervals + 1, f.knots.len())));
        }
        Ok(GainSchedule {
            t_start: f.t_start,
            t_final: f.t_final,
            step: f.step,
            a0: from_row_major(n, n, &f.a0, "a0")?,
            b0: from_row_major(n, m, &f.b0, "b0")?,
            q: from_row_major(n, n, &f.q, "q")?,
            r: from_row_major(m, m, &f.r, "r")?,
            s: from_row_major(n, n, &f.s, "s")?,
            knots: f
                .knots
                .iter()
                .map(|k| from_row_major(n, n, k, "knot"))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}
