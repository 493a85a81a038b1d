//! Cascaded flight controller: translational LQR on the point mass, thrust
//! recovery, desired attitude with a scheduled roll flip, geometric attitude
//! errors on SO(3), and the attitude feedback law.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdre::SdreController;
use crate::so3::{euler_to_rotation, vee_unchecked, Rotation, Vec3};
use crate::theta_d::{solve_t0, GainSchedule, SeriesTerms, ThetaDController};
use crate::vehicle::{coriolis_matrix, inertia_matrix, VehicleParams, VehicleState};

/// Guard on `trace(R_d^T R) + 1` in the attitude error denominator.
pub const TRACE_GUARD: f64 = 1e-8;

/// Diagonal quadratic penalties for one subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penalties {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

impl Penalties {
    pub fn translational_default() -> Self {
        Penalties {
            q: vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            r: vec![1.0; 3],
            s: vec![10.0, 10.0, 10.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn attitude_default() -> Self {
        Penalties {
            q: vec![10.0, 10.0, 10.0, 5.0, 5.0, 5.0],
            r: vec![1.0; 3],
            s: vec![100.0, 100.0, 100.0, 1.0, 1.0, 1.0],
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.q.len() != n || self.s.len() != n || self.r.len() != m {
            return Err(Error::Dimension(format!("penalties need q, s of length {n} and r of length {m}")));
        }
        if self.q.iter().chain(&self.s).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter("q and s penalties must be non-negative".into()));
        }
        if self.r.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter("r penalties must be positive".into()));
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.q))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.r))
    }

    pub fn s_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.s))
    }
}

/// Desired position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationalSetpoint {
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
}

impl TranslationalSetpoint {
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_iterator(6, self.position.iter().chain(&self.velocity).copied())
    }
}

/// `A_t = [[0, I], [0, -D/m]]`, `B_t = [0; I]`.
pub fn translational_matrices(params: &VehicleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DMatrix::zeros(6, 3);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
        a[(i + 3, i + 3)] = -params.drag[i] / params.mass;
        b[(i + 3, i)] = 1.0;
    }
    (a, b)
}

/// Backward Riccati schedule of the translational subsystem.
pub fn translational_gain(pen: &Penalties, params: &VehicleParams, t_final: f64, step: f64) -> Result<GainSchedule> {
    pen.validate(6, 3)?;
    let (a, b) = translational_matrices(params);
    solve_t0(&a, &b, &pen.q_matrix(), &pen.r_matrix(), &pen.s_matrix(), t_final, step)
}

pub fn translational_state(x: &VehicleState) -> DVector<f64> {
    DVector::from_iterator(6, x.position.iter().chain(x.velocity.iter()).copied())
}

/// Specific-force command `-R^-1 B_t^T K_t(t) (x_t - x_des)`, m/s^2.
pub fn translational_control(x_t: &DVector<f64>, setpoint: &TranslationalSetpoint, schedule: &GainSchedule, t: f64) -> Result<Vec3> {
    let u = -(schedule.lqr_gain(t)? * (x_t - setpoint.as_vector()));
    Ok(Vec3::new(u[0], u[1], u[2]))
}

/// Collective thrust: the body-z projection of the desired specific force, times mass.
pub fn recover_thrust(u_t: &Vec3, r: &Rotation, params: &VehicleParams) -> f64 {
    let m = r.matrix();
    params.mass * (m[(0, 2)] * u_t.x + m[(1, 2)] * u_t.y + m[(2, 2)] * (u_t.z + params.gravity))
}

/// Single roll flip between `t1` and `t2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipSchedule {
    pub t1: f64,
    pub t2: f64,
    pub t_final: f64,
    /// Flip angle, rad.
    pub phi_f: f64,
}

impl Default for FlipSchedule {
    fn default() -> Self {
        FlipSchedule {
            t1: 3.0,
            t2: 5.0,
            t_final: 10.0,
            phi_f: PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipPhase {
    Before,
    During,
    After,
}

impl FlipSchedule {
    /// A schedule whose window lies past the horizon, so no flip happens.
    pub fn none(t_final: f64) -> Self {
        FlipSchedule {
            t1: 2.0 * t_final,
            t2: 3.0 * t_final,
            t_final,
            phi_f: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t1 && self.t1 < self.t2 && self.t_final > 0.0) || !self.phi_f.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "flip schedule needs 0 < t1 < t2 and t_final > 0, got t1 = {}, t2 = {}, t_final = {}",
                self.t1, self.t2, self.t_final
            )));
        }
        Ok(())
    }

    pub fn phase(&self, t: f64) -> FlipPhase {
        if t < self.t1 {
            FlipPhase::Before
        } else if t < self.t2 {
            FlipPhase::During
        } else {
            FlipPhase::After
        }
    }

    /// Roll reference: passthrough, then `phi_f`, then offset by `phi_f`.
    pub fn roll_reference(&self, phi_des: f64, t: f64) -> f64 {
        match self.phase(t) {
            FlipPhase::Before => phi_des,
            FlipPhase::During => self.phi_f,
            FlipPhase::After => phi_des + self.phi_f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiDesMode {
    /// Argument divided by the squared specific-force norm.
    Squared,
    /// Argument divided by the specific-force norm.
    #[default]
    Normalized,
}

/// Roll and pitch that align body z with the specific force `u_t + g e3`
/// under heading `psi`.
pub fn desired_roll_pitch(u_t: &Vec3, psi: f64, gravity: f64, mode: PhiDesMode) -> Result<(f64, f64)> {
    let (sp, cp) = psi.sin_cos();
    let vertical = u_t.z + gravity;
    let num_theta = u_t.x * cp + u_t.y * sp;
    let theta = if num_theta == 0.0 && vertical == 0.0 { 0.0 } else { (num_theta / vertical).atan() };
    let norm_sq = u_t.x * u_t.x + u_t.y * u_t.y + vertical * vertical;
    let num_phi = u_t.x * sp - u_t.y * cp;
    let arg = if num_phi == 0.0 {
        0.0
    } else {
        match mode {
            PhiDesMode::Normalized => num_phi / norm_sq.sqrt(),
            PhiDesMode::Squared => num_phi / norm_sq,
        }
    };
    if !(arg.abs() <= 1.0) {
        return Err(Error::ArcsinDomain(arg));
    }
    Ok((arg.asin(), theta))
}

/// Desired rotation at time `t`, including the flip override of the roll.
pub fn desired_rotation(u_t: &Vec3, psi: f64, t: f64, flip: &FlipSchedule, gravity: f64, mode: PhiDesMode) -> Result<(Rotation, f64, f64)> {
    let (phi_des, theta_des) = desired_roll_pitch(u_t, psi, gravity, mode)?;
    let phi_ref = flip.roll_reference(phi_des, t);
    Ok((euler_to_rotation(phi_ref, theta_des, psi), phi_ref, theta_des))
}

/// Body rate of `R_d` at the middle sample from three samples spaced `h`.
pub fn central_difference_rate(r_prev: &Rotation, r_cur: &Rotation, r_next: &Rotation, h: f64) -> Vec3 {
    let m = r_cur.matrix().transpose() * (r_next.matrix() - r_prev.matrix()) / (2.0 * h);
    vee_unchecked(&((m - m.transpose()) * 0.5))
}

/// Desired-attitude generator holding the short `R_d` history needed for `Pi_d`.
///
/// `Pi_d` at step `k` is the central difference centred on step `k - 1`, so
/// it uses only past and present references. It is zero until two samples of
/// history exist and whenever the three samples straddle a flip switch.
#[derive(Debug, Clone)]
pub struct DesiredAttitude {
    pub flip: FlipSchedule,
    pub psi_des: f64,
    pub mode: PhiDesMode,
    pub gravity: f64,
    pub h: f64,
    history: Vec<(Rotation, FlipPhase)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeReference {
    pub rotation: Rotation,
    pub rate: Vec3,
    pub roll: f64,
    pub pitch: f64,
}

impl DesiredAttitude {
    pub fn new(flip: FlipSchedule, psi_des: f64, mode: PhiDesMode, gravity: f64, h: f64) -> Self {
        DesiredAttitude { flip, psi_des, mode, gravity, h, history: Vec::with_capacity(3) }
    }

    pub fn update(&mut self, u_t: &Vec3, t: f64) -> Result<AttitudeReference> {
        let (rotation, roll, pitch) = desired_rotation(u_t, self.psi_des, t, &self.flip, self.gravity, self.mode)?;
        if self.history.len() == 3 {
            self.history.remove(0);
        }
        self.history.push((rotation, self.flip.phase(t)));
        let rate = match self.history.as_slice() {
            [(r0, p0), (r1, p1), (r2, p2)] if p0 == p1 && p1 == p2 => central_difference_rate(r0, r1, r2, self.h),
            _ => Vec3::zeros(),
        };
        Ok(AttitudeReference { rotation, rate, roll, pitch })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntipodalPolicy {
    Error,
    /// Replace the error by the unit rotation axis when the denominator is guarded.
    #[default]
    Guarded,
}

/// `E = 2 - sqrt(trace(R_d^T R) + 1)`, in `[0, 2]`.
pub fn error_function(r: &Rotation, r_d: &Rotation) -> f64 {
    let tr = (r_d.matrix().transpose() * r.matrix()).trace();
    (2.0 - (tr + 1.0).max(0.0).sqrt()).clamp(0.0, 2.0)
}

/// Unit axis of a rotation by (nearly) pi, sign-fixed so its largest component is positive.
fn half_turn_axis(rel: &Matrix3<f64>) -> Vec3 {
    let b = (rel + Matrix3::identity()) * 0.5;
    let col = (0..3).max_by(|&i, &j| b.column(i).norm().total_cmp(&b.column(j).norm())).unwrap_or(0);
    let mut axis = b.column(col).into_owned();
    let n = axis.norm();
    if n == 0.0 {
        return Vec3::x();
    }
    axis /= n;
    let imax = (0..3).max_by(|&i, &j| axis[i].abs().total_cmp(&axis[j].abs())).unwrap_or(0);
    if axis[imax] < 0.0 {
        axis = -axis;
    }
    axis
}

/// `e_R = (R_d^T R - R^T R_d)^vee / (2 sqrt(trace(R_d^T R) + 1))`.
///
/// Returns the error and whether the antipodal guard was used.
pub fn attitude_error(r: &Rotation, r_d: &Rotation, policy: AntipodalPolicy) -> Result<(Vec3, bool)> {
    let rel = r_d.matrix().transpose() * r.matrix();
    let gap = rel.trace() + 1.0;
    if gap > TRACE_GUARD {
        let num = vee_unchecked(&(rel - rel.transpose()));
        return Ok((num / (2.0 * gap.sqrt()), false));
    }
    match policy {
        AntipodalPolicy::Error => Err(Error::Antipodal(gap)),
        AntipodalPolicy::Guarded => Ok((half_turn_axis(&rel), true)),
    }
}

/// `e_Omega = Pi - R^T R_d Pi_d`
pub fn angular_rate_error(pi: &Vec3, r: &Rotation, r_d: &Rotation, pi_d: &Vec3) -> Vec3 {
    pi - r.matrix().transpose() * r_d.matrix() * pi_d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeErrors {
    pub e_r: Vec3,
    pub e_omega: Vec3,
    pub e: f64,
    pub guarded: bool,
}

pub fn attitude_errors(x: &VehicleState, reference: &AttitudeReference, policy: AntipodalPolicy) -> Result<AttitudeErrors> {
    let (e_r, guarded) = attitude_error(&x.rotation, &reference.rotation, policy)?;
    let e_omega = angular_rate_error(&x.body_rates(), &x.rotation, &reference.rotation, &reference.rate);
    Ok(AttitudeErrors { e_r, e_omega, e: error_function(&x.rotation, &reference.rotation), guarded })
}

impl AttitudeErrors {
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(6, self.e_r.iter().chain(self.e_omega.iter()).copied())
    }
}

/// Constant hover pair `A0 = [[0, I], [0, 0]]`, `B0 = [0; I_body^-1]`.
pub fn attitude_nominal(params: &VehicleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a0 = DMatrix::zeros(6, 6);
    let mut b0 = DMatrix::zeros(6, 3);
    for i in 0..3 {
        a0[(i, i + 3)] = 1.0;
        b0[(i + 3, i)] = 1.0 / params.inertia[i];
    }
    (a0, b0)
}

/// State-dependent coefficients of the attitude subsystem on `(euler, euler_rates)`:
/// `A_a = [[0, I], [0, -J^-1 C]]`, `B_a = [0; J^-1]`.
pub fn attitude_sdc(x: &VehicleState, params: &VehicleParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let j = inertia_matrix(&x.euler, params)?;
    let c = coriolis_matrix(&x.euler, &x.euler_rates, params)?;
    let j_inv = j.try_inverse().ok_or(Error::Singular("inertia matrix"))?;
    let jc = j_inv * c;
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DMatrix::zeros(6, 3);
    for r in 0..3 {
        a[(r, r + 3)] = 1.0;
        for col in 0..3 {
            a[(r + 3, col + 3)] = -jc[(r, col)];
            b[(r + 3, col)] = j_inv[(r, col)];
        }
    }
    Ok((a, b))
}

/// Attitude feedback law, either theta-D over the hover pair or SDRE.
#[derive(Debug, Clone)]
pub enum AttitudeController {
    ThetaD(Box<ThetaDController>),
    Sdre(Box<SdreController>),
}

/// Torque command plus the theta-D series terms when available.
#[derive(Debug, Clone)]
pub struct AttitudeCommand {
    pub torque: Vec3,
    pub terms: Option<SeriesTerms>,
}

impl AttitudeController {
    pub fn name(&self) -> &'static str {
        match self {
            AttitudeController::ThetaD(_) => "theta_d",
            AttitudeController::Sdre(_) => "sdre",
        }
    }

    /// `u = -R^-1 g(x)^T P [e_R; e_Omega]` with `P` from the selected method.
    pub fn control(&self, a_a: &DMatrix<f64>, b_a: &DMatrix<f64>, t: f64, z: &DVector<f64>) -> Result<AttitudeCommand> {
        match self {
            AttitudeController::ThetaD(c) => {
                let a_x = a_a - &c.schedule.a0;
                let b_x = b_a - &c.schedule.b0;
                let terms = c.series_terms(&a_x, &b_x, t)?;
                let u = c.control_from_terms(&terms, &b_x, z);
                Ok(AttitudeCommand { torque: Vec3::new(u[0], u[1], u[2]), terms: Some(terms) })
            }
            AttitudeController::Sdre(c) => {
                let u = c.control(a_a, b_a, t, z)?;
                Ok(AttitudeCommand { torque: Vec3::new(u[0], u[1], u[2]), terms: None })
            }
        }
    }
}
