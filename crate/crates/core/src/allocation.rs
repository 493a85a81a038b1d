//! Control allocation for the variable-pitch rotors.
//!
//! A commanded wrench is split into its linear part (thrust, roll and pitch
//! torques, linear in the thrust coefficients) and the yaw torque, which
//! depends on `|C|^(1/2) C`. Coefficients come from the augmented
//! pseudo-inverse fixed point
//!
//! ```text
//! C = U(C)^-1 M1^T (M1 U(C)^-1 M1^T)^-1 H1,   U(C) = W - m(C) f(C)
//! ```
//!
//! where `m(C)` is the yaw multiplier. With [`YawHandling::Penalty`] it is the
//! plain penalty term `mu (tau_psi / a - kappa(C))`; with
//! [`YawHandling::Multiplier`] a shift is accumulated on top of it (method of
//! multipliers) so the yaw constraint is met exactly at convergence.
//! Blade angles follow from the blade-element relation, are clamped to their
//! limits and mapped back to the wrench the rotors actually deliver.

use nalgebra::{Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::Vec3;
use crate::vehicle::{VehicleParams, Wrench};

/// Sign pattern of the yaw row.
const YAW_SIGNS: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BladeCoefficients(pub Vector4<f64>);

impl BladeCoefficients {
    pub fn new(c: [f64; 4]) -> Self {
        BladeCoefficients(Vector4::from(c))
    }

    pub fn uniform(c: f64) -> Self {
        BladeCoefficients(Vector4::repeat(c))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRotorConstants {
    /// Thrust per unit coefficient, `rho pi r^4 omega^2`.
    pub thrust_gain: f64,
    /// Yaw gain `r K / sqrt(2)`.
    pub yaw_gain: f64,
    /// Rotor solidity `N_b c / (pi r)`.
    pub solidity: f64,
}

impl DerivedRotorConstants {
    pub fn from_params(p: &VehicleParams) -> Self {
        let thrust_gain = p.air_density * std::f64::consts::PI * p.blade_radius.powi(4) * p.rotor_speed.powi(2);
        DerivedRotorConstants {
            thrust_gain,
            yaw_gain: p.blade_radius * thrust_gain / std::f64::consts::SQRT_2,
            solidity: p.blades_per_rotor as f64 * p.chord / (std::f64::consts::PI * p.blade_radius),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KappaGradMode {
    /// Diagonal factor `3/2 sign(C)/sqrt|C|`, so that `f(C) C` is the exact
    /// gradient of `kappa`.
    #[default]
    Exact,
    /// Diagonal factor `1/2 sign(C)/sqrt|C|` (derivative of the square-root
    /// factor alone).
    SqrtOnly,
}

impl KappaGradMode {
    fn factor(self) -> f64 {
        match self {
            KappaGradMode::Exact => 1.5,
            KappaGradMode::SqrtOnly => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YawHandling {
    /// Quadratic penalty only; yaw torque is matched approximately.
    Penalty,
    /// Penalty plus accumulated multiplier; yaw torque matched exactly.
    #[default]
    Multiplier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocationConfig {
    /// Row-major 4x4 weight, symmetric positive definite.
    pub weight: [[f64; 4]; 4],
    pub mu_psi: f64,
    pub coefficient_floor: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub kappa_grad_mode: KappaGradMode,
    pub yaw_handling: YawHandling,
    /// Solve on the null line of the linear mixer when the fixed point stalls.
    pub null_space_fallback: bool,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        AllocationConfig {
            weight: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            mu_psi: 10.0,
            coefficient_floor: 1e-6,
            max_iters: 500,
            tol: 1e-10,
            damping: 0.5,
            kappa_grad_mode: KappaGradMode::Exact,
            yaw_handling: YawHandling::Multiplier,
            null_space_fallback: true,
        }
    }
}

impl AllocationConfig {
    pub fn weight_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.weight[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weight_matrix();
        if (w - w.transpose()).norm() > 1e-12 || w.cholesky().is_none() {
            return Err(Error::InvalidParameter("allocation weight must be symmetric positive definite".into()));
        }
        if !(self.mu_psi > 0.0) {
            return Err(Error::InvalidParameter("mu_psi must be positive".into()));
        }
        if !(self.coefficient_floor > 0.0) || !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter("coefficient_floor, tol and max_iters must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Caller-owned warm start carried between control steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WarmStart {
    pub coefficients: BladeCoefficients,
    pub yaw_shift: f64,
}

impl WarmStart {
    pub fn hover(params: &VehicleParams) -> Self {
        WarmStart {
            coefficients: hover_coefficients(params),
            yaw_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationSolution {
    pub coefficients: BladeCoefficients,
    /// Multiplier of the linear constraints.
    pub lagrange: Vector3<f64>,
    /// Effective yaw multiplier used in the final `U(C)`.
    pub yaw_multiplier: f64,
    /// Accumulated yaw shift (zero in penalty mode).
    pub yaw_shift: f64,
    pub iterations: usize,
    /// Produced by the null-line solve rather than the fixed point.
    pub fallback: bool,
}

impl AllocationSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            coefficients: self.coefficients,
            yaw_shift: self.yaw_shift,
        }
    }
}

/// Linear part of the mixer: rows thrust, roll torque, pitch torque.
pub fn linear_mixer(k: &DerivedRotorConstants, arm: f64) -> Matrix3x4<f64> {
    let t = k.thrust_gain;
    let lt = arm * t;
    Matrix3x4::new(t, t, t, t, 0.0, -lt, 0.0, lt, -lt, 0.0, lt, 0.0)
}

/// Normalised yaw torque `sum_i s_i sqrt|C_i| C_i`.
pub fn kappa(c: &BladeCoefficients) -> f64 {
    c.0.iter().zip(YAW_SIGNS).map(|(ci, s)| s * ci.abs().sqrt() * ci).sum()
}

/// Diagonal of the yaw-gradient factor; `|C_i|` is floored at `floor` and
/// `sign(0) = +1`.
pub fn f_tilde(c: &BladeCoefficients, floor: f64, mode: KappaGradMode) -> Vector4<f64> {
    let factor = mode.factor();
    Vector4::from_fn(|i, _| {
        let ci = c.0[i];
        let sign = if ci < 0.0 { -1.0 } else { 1.0 };
        factor * YAW_SIGNS[i] * sign / ci.abs().max(floor).sqrt()
    })
}

pub fn coefficients_to_wrench(c: &BladeCoefficients, k: &DerivedRotorConstants, arm: f64) -> Wrench {
    let lin = linear_mixer(k, arm) * c.0;
    Wrench::new(lin[0], Vec3::new(lin[1], lin[2], k.yaw_gain * kappa(c)))
}

fn upsilon(c: &BladeCoefficients, multiplier: f64, cfg: &AllocationConfig, w: &Matrix4<f64>) -> Matrix4<f64> {
    w - Matrix4::from_diagonal(&(f_tilde(c, cfg.coefficient_floor, cfg.kappa_grad_mode) * multiplier))
}

/// One evaluation of the pseudo-inverse map for a frozen `U`.
fn pseudo_inverse_map(
    ups: &Matrix4<f64>,
    m1: &Matrix3x4<f64>,
    h1: &Vector3<f64>,
) -> Result<(Vector4<f64>, Vector3<f64>)> {
    let ups_inv = ups.try_inverse().ok_or(Error::Singular("allocation matrix U(C)"))?;
    let s = m1 * ups_inv * m1.transpose();
    let lagrange = s.lu().solve(h1).ok_or(Error::Singular("allocation Schur complement"))?;
    Ok((ups_inv * m1.transpose() * lagrange, lagrange))
}

/// Solves for thrust coefficients realising `h1 = (T, tau_roll, tau_pitch)`
/// and yaw torque `tau_psi`.
pub fn wrench_to_coefficients(
    h1: &Vector3<f64>,
    tau_psi: f64,
    cfg: &AllocationConfig,
    k: &DerivedRotorConstants,
    arm: f64,
    warm: &WarmStart,
) -> Result<AllocationSolution> {
    let w = cfg.weight_matrix();
    let m1 = linear_mixer(k, arm);
    let target = tau_psi / k.yaw_gain;
    let lambda = cfg.damping;
    let multiplier_mode = cfg.yaw_handling == YawHandling::Multiplier;

    let mut c = warm.coefficients;
    let mut shift = if multiplier_mode { warm.yaw_shift } else { 0.0 };
    let mut last_step = f64::INFINITY;

    for it in 1..=cfg.max_iters {
        let multiplier = shift + cfg.mu_psi * (target - kappa(&c));
        let (mapped, _) = pseudo_inverse_map(&upsilon(&c, multiplier, cfg, &w), &m1, h1)?;
        let next = BladeCoefficients(c.0 * (1.0 - lambda) + mapped * lambda);
        if multiplier_mode {
            shift += cfg.mu_psi * (target - kappa(&next));
        }
        last_step = (next.0 - c.0).norm();
        c = next;
        if !last_step.is_finite() {
            break;
        }
        let yaw_ok = !multiplier_mode || (target - kappa(&c)).abs() < cfg.tol;
        if last_step < cfg.tol && yaw_ok {
            // Final undamped evaluation so the linear constraint holds exactly.
            let multiplier = shift + cfg.mu_psi * (target - kappa(&c));
            let (coefficients, lagrange) = pseudo_inverse_map(&upsilon(&c, multiplier, cfg, &w), &m1, h1)?;
            return Ok(AllocationSolution {
                coefficients: BladeCoefficients(coefficients),
                lagrange,
                yaw_multiplier: multiplier,
                yaw_shift: shift,
                iterations: it,
                fallback: false,
            });
        }
    }
    Err(Error::AllocationNonConvergence {
        iterations: cfg.max_iters,
        last_step,
        last_iterate: c.as_array(),
    })
}

/// Direction spanning the null space of the linear mixer.
pub const NULL_DIRECTION: [f64; 4] = [0.5, -0.5, 0.5, -0.5];

/// Coefficients meeting `M1 C = h1` and `kappa(C) = tau_psi / a` exactly.
///
/// The linear constraints leave a line `C_p + s n`; along it `kappa` is
/// strictly decreasing, so the yaw constraint has a unique root, found by
/// bracketing and bisection. Multipliers are recovered from stationarity.
pub fn null_space_coefficients(
    h1: &Vector3<f64>,
    tau_psi: f64,
    cfg: &AllocationConfig,
    k: &DerivedRotorConstants,
    arm: f64,
) -> Result<AllocationSolution> {
    let m1 = linear_mixer(k, arm);
    let gram = (m1 * m1.transpose()).try_inverse().ok_or(Error::Singular("mixer Gram matrix"))?;
    let base = m1.transpose() * gram * h1;
    let n = Vector4::from(NULL_DIRECTION);
    let target = tau_psi / k.yaw_gain;
    let f = |s: f64| kappa(&BladeCoefficients(base + n * s)) - target;

    let mut width = base.norm().max(1e-3);
    let (mut lo, mut hi) = (-width, width);
    while f(lo) < 0.0 || f(hi) > 0.0 {
        width *= 2.0;
        lo = -width;
        hi = width;
        if width > 1e12 {
            return Err(Error::AllocationNonConvergence { iterations: 0, last_step: width, last_iterate: base.into() });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * width {
            break;
        }
    }
    let c = BladeCoefficients(base + n * (0.5 * (lo + hi)));

    let w = cfg.weight_matrix();
    let grad_dir = f_tilde(&c, cfg.coefficient_floor, cfg.kappa_grad_mode).component_mul(&c.0);
    let mut system = Matrix4::zeros();
    system.fixed_view_mut::<4, 3>(0, 0).copy_from(&m1.transpose());
    system.set_column(3, &grad_dir);
    let (lagrange, multiplier) = match system.lu().solve(&(w * c.0)) {
        Some(sol) => (Vector3::new(sol[0], sol[1], sol[2]), sol[3]),
        None => (Vector3::zeros(), 0.0),
    };
    Ok(AllocationSolution {
        coefficients: c,
        lagrange,
        yaw_multiplier: multiplier,
        yaw_shift: if cfg.yaw_handling == YawHandling::Multiplier { multiplier } else { 0.0 },
        iterations: 0,
        fallback: true,
    })
}

/// `|| W C - m f(C) C - M1^T Lambda ||` for a given multiplier.
pub fn stationarity_residual(
    c: &BladeCoefficients,
    lagrange: &Vector3<f64>,
    multiplier: f64,
    cfg: &AllocationConfig,
    k: &DerivedRotorConstants,
    arm: f64,
) -> f64 {
    let w = cfg.weight_matrix();
    let f = f_tilde(c, cfg.coefficient_floor, cfg.kappa_grad_mode);
    let grad = w * c.0 - f.component_mul(&c.0) * multiplier - linear_mixer(k, arm).transpose() * lagrange;
    grad.norm()
}

pub fn coefficients_to_blade_angles(c: &BladeCoefficients, k: &DerivedRotorConstants, p: &VehicleParams) -> [f64; 4] {
    let slope = 6.0 / (k.solidity * p.lift_slope);
    c.as_array().map(|ci| 1.5 * p.inflow_ratio + slope * ci)
}

pub fn blade_angles_to_coefficients(alpha: &[f64; 4], k: &DerivedRotorConstants, p: &VehicleParams) -> BladeCoefficients {
    let gain = k.solidity * p.lift_slope / 6.0;
    BladeCoefficients::new(alpha.map(|a| gain * (a - 1.5 * p.inflow_ratio)))
}

pub fn saturate_blade_angles(alpha: &[f64; 4], min: f64, max: f64) -> ([f64; 4], [bool; 4]) {
    let mut out = *alpha;
    let mut flags = [false; 4];
    for i in 0..4 {
        if alpha[i] > max {
            out[i] = max;
            flags[i] = true;
        } else if alpha[i] < min {
            out[i] = min;
            flags[i] = true;
        }
    }
    (out, flags)
}

pub fn hover_coefficients(p: &VehicleParams) -> BladeCoefficients {
    let k = DerivedRotorConstants::from_params(p);
    BladeCoefficients::uniform(p.mass * p.gravity / (4.0 * k.thrust_gain))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    /// Wrench delivered by the saturated blades.
    pub achievable: Wrench,
    /// Coefficients after saturation.
    pub coefficients: BladeCoefficients,
    pub blade_angles: [f64; 4],
    pub saturated: [bool; 4],
    /// Unsaturated optimiser output.
    pub solution: AllocationSolution,
}

/// Full chain: coefficients, blade angles, clamp, recovered coefficients, wrench.
pub fn allocate(wrench: &Wrench, cfg: &AllocationConfig, p: &VehicleParams, warm: &WarmStart) -> Result<Allocation> {
    let k = DerivedRotorConstants::from_params(p);
    let h1 = Vector3::new(wrench.thrust, wrench.torque.x, wrench.torque.y);
    let solution = match wrench_to_coefficients(&h1, wrench.torque.z, cfg, &k, p.arm_length, warm) {
        Err(Error::AllocationNonConvergence { .. }) if cfg.null_space_fallback => {
            log::debug!("allocation fixed point stalled; using the null-line solve");
            null_space_coefficients(&h1, wrench.torque.z, cfg, &k, p.arm_length)?
        }
        other => other?,
    };
    let raw = coefficients_to_blade_angles(&solution.coefficients, &k, p);
    let (blade_angles, saturated) = saturate_blade_angles(&raw, p.blade_angle_min, p.blade_angle_max);
    let coefficients = blade_angles_to_coefficients(&blade_angles, &k, p);
    Ok(Allocation {
        achievable: coefficients_to_wrench(&coefficients, &k, p.arm_length),
        coefficients,
        blade_angles,
        saturated,
        solution,
    })
}

/// Allocates each wrench independently from the hover warm start.
pub fn allocate_batch_seq(wrenches: &[Wrench], cfg: &AllocationConfig, p: &VehicleParams) -> Vec<Result<Allocation>> {
    let warm = WarmStart::hover(p);
    wrenches.iter().map(|w| allocate(w, cfg, p, &warm)).collect()
}

#[cfg(feature = "parallel")]
pub fn allocate_batch_par(wrenches: &[Wrench], cfg: &AllocationConfig, p: &VehicleParams) -> Vec<Result<Allocation>> {
    use rayon::prelude::*;
    let warm = WarmStart::hover(p);
    wrenches.par_iter().map(|w| allocate(w, cfg, p, &warm)).collect()
}

pub fn allocate_batch(wrenches: &[Wrench], cfg: &AllocationConfig, p: &VehicleParams) -> Vec<Result<Allocation>> {
    #[cfg(feature = "parallel")]
    {
        allocate_batch_par(wrenches, cfg, p)
    }
    #[cfg(not(feature = "parallel"))]
    {
        allocate_batch_seq(wrenches, cfg, p)
    }
}
