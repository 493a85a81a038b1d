//! State-dependent Riccati equation baseline.
//!
//! At each step the coefficient pair `(A(x), B(x))` is frozen and the
//! algebraic Riccati equation is solved from scratch. The finite-horizon
//! variant propagates the frozen-coefficient differential Riccati equation
//! in closed form from `P(tf) = S` to the current time.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theta_d::solve_lyapunov;

/// Eigenvalues with real part smaller than this (relative to the Hamiltonian
/// norm) are treated as lying on the imaginary axis.
const IMAGINARY_AXIS_TOL: f64 = 1e-10;

type CMatrix = DMatrix<Complex<f64>>;

fn hamiltonian(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&-g);
    h.view_mut((n, 0), (n, n)).copy_from(&-q);
    h.view_mut((n, n), (n, n)).copy_from(&-a.transpose());
    h
}

fn control_weight(b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("R must be positive definite".into()))?
        .inverse();
    let g = b * &r_inv * b.transpose();
    Ok((r_inv, g))
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?} are inconsistent",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    Ok(())
}

/// Swaps diagonal entries `k` and `k + 1` of the upper-triangular `t`,
/// updating the Schur vectors `z`.
fn swap_adjacent(t: &mut CMatrix, z: &mut CMatrix, k: usize) {
    let a = t[(k, k)];
    let b = t[(k + 1, k + 1)];
    let c = t[(k, k + 1)];
    let v1 = c;
    let v2 = b - a;
    let norm = (v1.norm_sqr() + v2.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    let (v1, v2) = (v1 / norm, v2 / norm);
    // columns of the 2x2 unitary: (v1, v2) and (-conj v2, conj v1)
    let dim = t.nrows();
    for j in 0..dim {
        let x = t[(k, j)];
        let y = t[(k + 1, j)];
        t[(k, j)] = v1.conj() * x + v2.conj() * y;
        t[(k + 1, j)] = -v2 * x + v1 * y;
    }
    for i in 0..dim {
        let x = t[(i, k)];
        let y = t[(i, k + 1)];
        t[(i, k)] = x * v1 + y * v2;
        t[(i, k + 1)] = -x * v2.conj() + y * v1.conj();
    }
    for i in 0..dim {
        let x = z[(i, k)];
        let y = z[(i, k + 1)];
        z[(i, k)] = x * v1 + y * v2;
        z[(i, k + 1)] = -x * v2.conj() + y * v1.conj();
    }
    t[(k + 1, k)] = Complex::new(0.0, 0.0);
}

fn stable_basis_from_schur(h: &DMatrix<f64>, n: usize) -> Result<CMatrix> {
    let hc: CMatrix = h.map(|x| Complex::new(x, 0.0));
    let schur = nalgebra::Schur::try_new(hc, 1e-14, 10_000).ok_or_else(|| Error::Are("Schur iteration did not converge".into()))?;
    let (mut z, mut t) = schur.unpack();
    let scale = h.norm().max(1.0);
    let dim = 2 * n;
    let mut stable = 0;
    for i in 0..dim {
        let re = t[(i, i)].re;
        if re.abs() < IMAGINARY_AXIS_TOL * scale {
            return Err(Error::Are("Hamiltonian has eigenvalues on the imaginary axis".into()));
        }
        if re < 0.0 {
            stable += 1;
        }
    }
    if stable != n {
        return Err(Error::Are(format!("expected {n} stable eigenvalues, found {stable}")));
    }
    // bubble stable eigenvalues to the leading block
    let mut target = 0;
    for i in 0..dim {
        if t[(i, i)].re < 0.0 {
            let mut k = i;
            while k > target {
                swap_adjacent(&mut t, &mut z, k - 1);
                k -= 1;
            }
            target += 1;
        }
    }
    Ok(z.columns(0, n).into_owned())
}

fn riccati_from_basis(basis: &CMatrix, n: usize) -> Result<DMatrix<f64>> {
    let u11 = basis.rows(0, n).into_owned();
    let u21 = basis.rows(n, n).into_owned();
    let u11_inv = u11.try_inverse().ok_or(Error::Are("stable subspace is not a graph".into()))?;
    let p = (u21 * u11_inv).map(|c| c.re);
    Ok((&p + p.transpose()) * 0.5)
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let inv = z.clone().try_inverse().ok_or(Error::Are("sign iteration hit a singular matrix".into()))?;
        let det = z.determinant().abs();
        let gamma = if det > 0.0 { det.powf(-1.0 / dim as f64) } else { 1.0 };
        let next = (&z * gamma + inv / gamma) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if change < 1e-13 {
            return Ok(z);
        }
    }
    Err(Error::Are("sign iteration did not converge".into()))
}

/// Stabilising ARE solution through the matrix sign function.
pub fn care_sign(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(a, b, q, r)?;
    let n = a.nrows();
    let (_, g) = control_weight(b, r)?;
    let w = matrix_sign(&hamiltonian(a, &g, q))?;
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&-(w.view((0, 0), (n, n)) + &id));
    rhs.view_mut((n, 0), (n, n)).copy_from(&-w.view((n, 0), (n, n)));
    let p = lhs.svd(true, true).solve(&rhs, 1e-12).map_err(|e| Error::Are(e.into()))?;
    Ok((&p + p.transpose()) * 0.5)
}

/// Stabilising solution of `A^T P + P A - P B R^-1 B^T P + Q = 0`.
///
/// Uses an ordered complex Schur decomposition of the Hamiltonian, falling
/// back to the matrix sign function if the Schur route fails.
pub fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(a, b, q, r)?;
    let n = a.nrows();
    let (_, g) = control_weight(b, r)?;
    let h = hamiltonian(a, &g, q);
    match stable_basis_from_schur(&h, n).and_then(|basis| riccati_from_basis(&basis, n)) {
        Ok(p) => Ok(p),
        Err(Error::Are(msg)) if msg.contains("imaginary") || msg.contains("stable eigenvalues") => Err(Error::Are(msg)),
        Err(e) => {
            log::debug!("Schur ARE route failed ({e}); using sign iteration");
            care_sign(a, b, q, r)
        }
    }
}

/// `||A^T P + P A - P G P + Q||`
pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let g = b * r.clone().try_inverse().expect("invertible R") * b.transpose();
    (a.transpose() * p + p * a - p * g * p + q).norm()
}

/// Frozen-coefficient differential Riccati solution `tau` seconds before the
/// terminal time, `P(tf) = S`.
pub fn finite_horizon_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
    tau: f64,
) -> Result<DMatrix<f64>> {
    check_dims(a, b, q, r)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("time to go {tau} must be non-negative")));
    }
    let n = a.nrows();
    let (_, g) = control_weight(b, r)?;
    let p_ss = care(a, b, q, r)?;
    let a_cl = a - &g * &p_ss;
    // A_cl D + D A_cl^T = G
    let d = solve_lyapunov(&a_cl.transpose(), &g)?;
    let e = (&a_cl * tau).exp();
    let m = &d - &e * &d * e.transpose();
    let k0 = s - &p_ss;
    let id = DMatrix::<f64>::identity(n, n);
    let inner = (id - &k0 * m).try_inverse().ok_or(Error::Singular("finite-horizon Riccati propagation"))?;
    let p = p_ss + e.transpose() * inner * k0 * e;
    Ok((&p + p.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdreConfig {
    /// Use the finite-horizon Riccati solution; otherwise the ARE solution.
    #[serde(default = "default_true")]
    pub finite_horizon: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SdreConfig {
    fn default() -> Self {
        SdreConfig { finite_horizon: true }
    }
}

/// Per-step Riccati feedback for a state-dependent coefficient pair.
#[derive(Debug, Clone)]
pub struct SdreController {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub t_final: f64,
    pub cfg: SdreConfig,
    r_inv: DMatrix<f64>,
}

impl SdreController {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, s: DMatrix<f64>, t_final: f64, cfg: SdreConfig) -> Result<Self> {
        let r_inv = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("R must be positive definite".into()))?
            .inverse();
        if q.shape() != s.shape() || q.nrows() != q.ncols() {
            return Err(Error::Dimension("Q and S must be square and equal in size".into()));
        }
        Ok(SdreController { q, r, s, t_final, cfg, r_inv })
    }

    /// Riccati matrix for the frozen pair at time `t`.
    pub fn riccati(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        if self.cfg.finite_horizon {
            finite_horizon_riccati(a, b, &self.q, &self.r, &self.s, (self.t_final - t).max(0.0))
        } else {
            care(a, b, &self.q, &self.r)
        }
    }

    pub fn gain(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        Ok(&self.r_inv * b.transpose() * self.riccati(a, b, t)?)
    }

    /// `u = -R^-1 B(x)^T P z`
    pub fn control(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-(self.gain(a, b, t)? * z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random(rng: &mut StdRng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn scalar_are() {
        // 2 a p - p^2 b^2 / r + q = 0
        let p = care(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 + 2f64.sqrt(), epsilon = 1e-12);
        let p = care(&scalar(0.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn double_integrator_are() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let p = care(&a, &b, &DMatrix::identity(2, 2), &scalar(1.0)).unwrap();
        let s3 = 3f64.sqrt();
        assert_relative_eq!(p, DMatrix::from_row_slice(2, 2, &[s3, 1.0, 1.0, s3]), epsilon = 1e-10);
    }

    #[test]
    fn random_are_residual_and_stability() {
        let mut rng = StdRng::seed_from_u64(50);
        for _ in 0..30 {
            let n = rng.gen_range(2..7);
            let m = rng.gen_range(1..=n);
            let a = random(&mut rng, n, n) * 2.0;
            let b = random(&mut rng, n, m);
            let q = DMatrix::identity(n, n);
            let r = DMatrix::identity(m, m);
            let p = care(&a, &b, &q, &r).unwrap();
            assert!(care_residual(&a, &b, &q, &r, &p) < 1e-8 * p.norm().max(1.0));
            let a_cl = &a - &b * b.transpose() * &p;
            assert!(a_cl.complex_eigenvalues().iter().all(|e| e.re < 0.0));
            let sign = care_sign(&a, &b, &q, &r).unwrap();
            assert_relative_eq!(p, sign, epsilon = 1e-7 * p.norm().max(1.0));
        }
    }

    #[test]
    fn imaginary_axis_hamiltonian_is_rejected() {
        // uncontrollable, undetectable oscillator
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::zeros(2, 2);
        assert!(care(&a, &b, &q, &scalar(1.0)).is_err());
    }

    #[test]
    fn finite_horizon_scalar_is_tanh() {
        for tau in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let p = finite_horizon_riccati(&scalar(0.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(0.0), tau).unwrap();
            assert_relative_eq!(p[(0, 0)], f64::tanh(tau), epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_horizon_terminal_and_steady_state() {
        let mut rng = StdRng::seed_from_u64(51);
        let a = random(&mut rng, 4, 4);
        let b = random(&mut rng, 4, 2);
        let q = DMatrix::identity(4, 4);
        let r = DMatrix::identity(2, 2);
        let s = DMatrix::identity(4, 4) * 3.0;
        let p0 = finite_horizon_riccati(&a, &b, &q, &r, &s, 0.0).unwrap();
        assert_relative_eq!(p0, s, epsilon = 1e-12);
        let p_inf = finite_horizon_riccati(&a, &b, &q, &r, &s, 50.0).unwrap();
        assert_relative_eq!(p_inf, care(&a, &b, &q, &r).unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn finite_horizon_matches_backward_integration() {
        let mut rng = StdRng::seed_from_u64(52);
        let a = random(&mut rng, 3, 3);
        let b = random(&mut rng, 3, 2);
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(2, 2);
        let s = DMatrix::identity(3, 3) * 2.0;
        let sched = crate::theta_d::solve_t0(&a, &b, &q, &r, &s, 1.0, 1e-4).unwrap();
        let p = finite_horizon_riccati(&a, &b, &q, &r, &s, 1.0).unwrap();
        assert_relative_eq!(p, sched.knots[0], epsilon = 1e-9);
    }

    #[test]
    fn controller_modes() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = scalar(1.0);
        let s = DMatrix::zeros(2, 2);
        let inf = SdreController::new(q.clone(), r.clone(), s.clone(), 10.0, SdreConfig { finite_horizon: false }).unwrap();
        let fin = SdreController::new(q, r, s, 10.0, SdreConfig::default()).unwrap();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(inf.control(&a, &b, 0.0, &z).unwrap()[0], -1.0, epsilon = 1e-10);
        assert_relative_eq!(fin.control(&a, &b, 10.0, &z).unwrap()[0], 0.0, epsilon = 1e-12);
        assert!(SdreController::new(DMatrix::identity(2, 2), scalar(-1.0), DMatrix::zeros(2, 2), 1.0, SdreConfig::default()).is_err());
    }
}
