//! Rigid-body model of the variable-pitch quadcopter.
//!
//! The 12-dimensional state is `[position, velocity, euler, euler_rates]`.
//! The attitude is additionally tracked as a rotation matrix, advanced on
//! SO(3) alongside the Euler angles.
//!
//! Torques in [`Wrench`] are body-frame torques (what the rotors produce).
//! The Euler-angle Lagrangian dynamics `J(q) q'' + C(q, q') q' = tau_gen`
//! receive the generalised force `tau_gen = W(q)^T tau_body`, where `W` maps
//! Euler rates to body rates. The inertia `J = W^T I W` and `C` is built from
//! its Christoffel symbols.

use nalgebra::{Matrix3, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{self, euler_to_rotation, Rotation, Vec3};

/// Guard band on `|pitch| = pi/2`.
pub const EULER_GUARD: f64 = 1e-3;

pub type StateVector = SVector<f64, 12>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// m/s^2
    pub gravity: f64,
    /// Diagonal translational drag, kg/s.
    pub drag: [f64; 3],
    /// Principal body inertia, kg m^2.
    pub inertia: [f64; 3],
    /// Rotor arm length, m.
    pub arm_length: f64,
    /// Blade tip radius, m.
    pub blade_radius: f64,
    /// Blade chord, m.
    pub chord: f64,
    pub blades_per_rotor: u32,
    /// kg/m^3
    pub air_density: f64,
    /// Steady-state rotor speed, rad/s.
    pub rotor_speed: f64,
    /// Airfoil lift-curve slope, 1/rad.
    pub lift_slope: f64,
    pub inflow_ratio: f64,
    /// Blade-angle limits, rad.
    pub blade_angle_min: f64,
    pub blade_angle_max: f64,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if !(self.gravity.is_finite()) {
            return bad("gravity must be finite");
        }
        if self.drag.iter().any(|d| !(*d >= 0.0)) {
            return bad("drag coefficients must be non-negative");
        }
        if self.inertia.iter().any(|i| !(*i > 0.0)) {
            return bad("principal inertias must be positive");
        }
        if !(self.arm_length > 0.0 && self.blade_radius > 0.0 && self.chord > 0.0) {
            return bad("arm length, blade radius and chord must be positive");
        }
        if self.blades_per_rotor == 0 {
            return bad("blades_per_rotor must be at least 1");
        }
        if !(self.air_density > 0.0 && self.rotor_speed > 0.0 && self.lift_slope > 0.0) {
            return bad("air density, rotor speed and lift slope must be positive");
        }
        if !(self.blade_angle_min < self.blade_angle_max) {
            return bad("blade_angle_min must be below blade_angle_max");
        }
        Ok(())
    }

    pub fn inertia_diag(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::from(self.inertia))
    }

    pub fn drag_diag(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::from(self.drag))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// (roll, pitch, yaw)
    pub euler: Vec3,
    pub euler_rates: Vec3,
    pub rotation: Rotation,
}

impl Default for VehicleState {
    fn default() -> Self {
        VehicleState {
            position: Vec3::zeros(),
            velocity: Vec3::zeros(),
            euler: Vec3::zeros(),
            euler_rates: Vec3::zeros(),
            rotation: Rotation::identity(),
        }
    }
}

impl VehicleState {
    /// State with the rotation matrix rebuilt from the Euler angles.
    pub fn from_vector(v: &StateVector) -> Self {
        let euler = Vec3::new(v[6], v[7], v[8]);
        VehicleState {
            position: Vec3::new(v[0], v[1], v[2]),
            velocity: Vec3::new(v[3], v[4], v[5]),
            euler,
            euler_rates: Vec3::new(v[9], v[10], v[11]),
            rotation: euler_to_rotation(euler.x, euler.y, euler.z),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        v.fixed_rows_mut::<3>(6).copy_from(&self.euler);
        v.fixed_rows_mut::<3>(9).copy_from(&self.euler_rates);
        v
    }

    /// Body angular velocity `W(euler) * euler_rates`.
    pub fn body_rates(&self) -> Vec3 {
        euler_rate_map(&self.euler) * self.euler_rates
    }
}

/// Collective thrust along body z (N) and body torques (N m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub thrust: f64,
    pub torque: Vec3,
}

impl Wrench {
    pub fn new(thrust: f64, torque: Vec3) -> Self {
        Wrench { thrust, torque }
    }
}

/// Maps Z-Y-X Euler rates to body angular velocity.
pub fn euler_rate_map(euler: &Vec3) -> Matrix3<f64> {
    let (sf, cf) = euler.x.sin_cos();
    let (st, ct) = euler.y.sin_cos();
    Matrix3::new(1.0, 0.0, -st, 0.0, cf, sf * ct, 0.0, -sf, cf * ct)
}

fn check_pitch(euler: &Vec3) -> Result<()> {
    if !(euler.y.abs() < std::f64::consts::FRAC_PI_2 - EULER_GUARD) {
        return Err(Error::EulerSingularity { pitch: euler.y.abs() });
    }
    Ok(())
}

/// Partial derivatives of `W` with respect to roll and pitch (`W` has no yaw dependence).
fn euler_rate_map_partials(euler: &Vec3) -> [Matrix3<f64>; 3] {
    let (sf, cf) = euler.x.sin_cos();
    let (st, ct) = euler.y.sin_cos();
    let d_roll = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sf, cf * ct, 0.0, -cf, -sf * ct);
    let d_pitch = Matrix3::new(0.0, 0.0, -ct, 0.0, 0.0, -sf * st, 0.0, 0.0, -cf * st);
    [d_roll, d_pitch, Matrix3::zeros()]
}

pub fn inertia_matrix(euler: &Vec3, params: &VehicleParams) -> Result<Matrix3<f64>> {
    check_pitch(euler)?;
    let w = euler_rate_map(euler);
    Ok(w.transpose() * params.inertia_diag() * w)
}

/// `dJ/dq_k` for k = roll, pitch, yaw.
fn inertia_partials(euler: &Vec3, params: &VehicleParams) -> [Matrix3<f64>; 3] {
    let w = euler_rate_map(euler);
    let i = params.inertia_diag();
    euler_rate_map_partials(euler).map(|dw| {
        let a = dw.transpose() * i * w;
        a + a.transpose()
    })
}

pub fn coriolis_matrix(euler: &Vec3, rates: &Vec3, params: &VehicleParams) -> Result<Matrix3<f64>> {
    check_pitch(euler)?;
    let dj = inertia_partials(euler, params);
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                let christoffel = 0.5 * (dj[k][(i, j)] + dj[j][(i, k)] - dj[i][(j, k)]);
                acc += christoffel * rates[k];
            }
            c[(i, j)] = acc;
        }
    }
    Ok(c)
}

/// Time derivative of the 12-dimensional state.
pub fn state_derivative(x: &VehicleState, w: &Wrench, params: &VehicleParams) -> Result<StateVector> {
    let j = inertia_matrix(&x.euler, params)?;
    let c = coriolis_matrix(&x.euler, &x.euler_rates, params)?;
    let body_z = x.rotation.matrix().column(2).into_owned();
    let accel = (body_z * w.thrust - Vec3::z() * (params.mass * params.gravity)
        - params.drag_diag() * x.velocity)
        / params.mass;
    let generalized = euler_rate_map(&x.euler).transpose() * w.torque;
    let euler_accel = j
        .lu()
        .solve(&(generalized - c * x.euler_rates))
        .ok_or(Error::Singular("inertia matrix"))?;

    let mut d = StateVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&x.velocity);
    d.fixed_rows_mut::<3>(3).copy_from(&accel);
    d.fixed_rows_mut::<3>(6).copy_from(&x.euler_rates);
    d.fixed_rows_mut::<3>(9).copy_from(&euler_accel);
    Ok(d)
}

/// One classical RK4 step of the Euler-angle state under a held wrench.
///
/// The rotation matrix is advanced with a fourth-order Munthe-Kaas scheme
/// driven by the body rates of the same four stages, so it stays consistent
/// with the integrated Euler angles to the integrator's order.
pub fn rk4_step(x: &VehicleState, w: &Wrench, h: f64, params: &VehicleParams) -> Result<VehicleState> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let y0 = x.to_vector();
    let stage = |y: &StateVector, rotation: Option<Rotation>| -> Result<(StateVector, Vec3)> {
        let mut s = VehicleState::from_vector(y);
        if let Some(r) = rotation {
            s.rotation = r;
        }
        Ok((state_derivative(&s, w, params)?, s.body_rates()))
    };

    let (k1, p1) = stage(&y0, Some(x.rotation))?;
    let y2 = y0 + k1 * (h / 2.0);
    let (k2, p2) = stage(&y2, None)?;
    let y3 = y0 + k2 * (h / 2.0);
    let (k3, p3) = stage(&y3, None)?;
    let y4 = y0 + k3 * h;
    let (k4, p4) = stage(&y4, None)?;
    let y_next = y0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

    // R = R0 exp(sigma) with body rates, so sigma' = dexp^-1 at -sigma
    let m1 = p1;
    let m2 = so3::dexp_inv(&(m1 * (-h / 2.0)), &p2);
    let m3 = so3::dexp_inv(&(m2 * (-h / 2.0)), &p3);
    let m4 = so3::dexp_inv(&(m3 * -h), &p4);
    let effective_rate = (m1 + m2 * 2.0 + m3 * 2.0 + m4) / 6.0;

    let mut next = VehicleState::from_vector(&y_next);
    next.rotation = so3::integrate_rotation(&x.rotation, &effective_rate, h);
    Ok(next)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn params() -> VehicleParams {
        crate::mission::MissionConfig::nominal().vehicle
    }

    fn random_euler(rng: &mut StdRng) -> Vec3 {
        Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-1.4..1.4), rng.gen_range(-3.0..3.0))
    }

    fn random_rates(rng: &mut StdRng) -> Vec3 {
        Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))
    }

    #[test]
    fn inertia_at_zero_attitude_is_body_inertia() {
        let p = params();
        assert_eq!(inertia_matrix(&Vec3::zeros(), &p).unwrap(), p.inertia_diag());
    }

    #[test]
    fn inertia_is_spd_in_region() {
        let p = params();
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..200 {
            let j = inertia_matrix(&random_euler(&mut rng), &p).unwrap();
            assert!((j - j.transpose()).norm() < 1e-12);
            let eig = j.symmetric_eigenvalues();
            assert!(eig.iter().all(|e| *e > 0.0));
        }
    }

    #[test]
    fn singular_pitch_is_reported() {
        let p = params();
        let e = Vec3::new(0.0, std::f64::consts::FRAC_PI_2 - 1e-4, 0.0);
        assert!(matches!(inertia_matrix(&e, &p), Err(Error::EulerSingularity { .. })));
        assert!(matches!(coriolis_matrix(&e, &Vec3::zeros(), &p), Err(Error::EulerSingularity { .. })));
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let p = params();
        let mut rng = StdRng::seed_from_u64(11);
        let c = coriolis_matrix(&random_euler(&mut rng), &Vec3::zeros(), &p).unwrap();
        assert_eq!(c, Matrix3::zeros());
    }

    #[test]
    fn inertia_rate_minus_twice_coriolis_is_skew() {
        let p = params();
        let mut rng = StdRng::seed_from_u64(12);
        let eps = 1e-6;
        for _ in 0..200 {
            let q = random_euler(&mut rng);
            let qd = random_rates(&mut rng);
            // central finite difference of J along the rate direction
            let jdot = (inertia_matrix(&(q + qd * eps), &p).unwrap()
                - inertia_matrix(&(q - qd * eps), &p).unwrap())
                / (2.0 * eps);
            let c = coriolis_matrix(&q, &qd, &p).unwrap();
            let n = jdot - c * 2.0;
            assert!((n + n.transpose()).norm() < 1e-8, "{}", (n + n.transpose()).norm());
        }
    }

    #[test]
    fn torque_free_motion_conserves_kinetic_energy_rate() {
        let mut p = params();
        p.drag = [0.0; 3];
        let mut rng = StdRng::seed_from_u64(13);
        let eps = 1e-6;
        for _ in 0..100 {
            let euler = random_euler(&mut rng);
            let rates = random_rates(&mut rng);
            let x = VehicleState {
                euler,
                euler_rates: rates,
                rotation: euler_to_rotation(euler.x, euler.y, euler.z),
                ..Default::default()
            };
            let d = state_derivative(&x, &Wrench::default(), &p).unwrap();
            let acc = Vec3::new(d[9], d[10], d[11]);
            let j = inertia_matrix(&euler, &p).unwrap();
            let jdot = (inertia_matrix(&(euler + rates * eps), &p).unwrap()
                - inertia_matrix(&(euler - rates * eps), &p).unwrap())
                / (2.0 * eps);
            // d/dt (1/2 q'^T J q') = q'^T J q'' + 1/2 q'^T J' q' = 0
            let rate = rates.dot(&(j * acc)) + 0.5 * rates.dot(&(jdot * rates));
            assert!(rate.abs() < 1e-6 * (1.0 + rates.norm_squared()), "{rate}");
        }
    }

    #[test]
    fn hover_is_equilibrium() {
        let p = params();
        let x = VehicleState::default();
        let w = Wrench::new(p.mass * p.gravity, Vec3::zeros());
        let d = state_derivative(&x, &w, &p).unwrap();
        assert_eq!(d, StateVector::zeros());
        let next = rk4_step(&x, &w, 1e-3, &p).unwrap();
        assert!((next.to_vector() - x.to_vector()).norm() < 1e-12);
    }

    #[test]
    fn free_fall_accelerates_at_g() {
        let mut p = params();
        p.drag = [0.0; 3];
        let d = state_derivative(&VehicleState::default(), &Wrench::default(), &p).unwrap();
        assert_eq!(Vec3::new(d[3], d[4], d[5]), Vec3::new(0.0, 0.0, -p.gravity));

        let mut x = VehicleState::default();
        for _ in 0..1000 {
            x = rk4_step(&x, &Wrench::default(), 1e-3, &p).unwrap();
        }
        assert!((x.velocity.z + p.gravity).abs() < 1e-9);
    }

    #[test]
    fn inverted_hover_with_negative_thrust_is_equilibrium() {
        let p = params();
        let x = VehicleState {
            euler: Vec3::new(std::f64::consts::PI, 0.0, 0.0),
            rotation: Rotation::from_matrix(Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))).unwrap(),
            ..Default::default()
        };
        let w = Wrench::new(-p.mass * p.gravity, Vec3::zeros());
        let d = state_derivative(&x, &w, &p).unwrap();
        assert!(Vec3::new(d[3], d[4], d[5]).norm() < 1e-12);
    }

    fn tumble(h: f64, t_end: f64, p: &VehicleParams) -> StateVector {
        let w = Wrench::new(p.mass * p.gravity, Vec3::new(0.02, -0.015, 0.01));
        let mut x = VehicleState {
            euler_rates: Vec3::new(1.0, 0.5, -0.3),
            ..Default::default()
        };
        let steps = (t_end / h).round() as usize;
        for _ in 0..steps {
            x = rk4_step(&x, &w, h, p).unwrap();
        }
        x.to_vector()
    }

    #[test]
    fn rk4_is_fourth_order() {
        let p = params();
        let reference = tumble(1e-4, 2.0, &p);
        let e1 = (tumble(4e-2, 2.0, &p) - reference).norm();
        let e2 = (tumble(2e-2, 2.0, &p) - reference).norm();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}, e1 {e1:e}, e2 {e2:e}");
    }

    #[test]
    fn drag_dissipates_translational_energy() {
        let p = params();
        let mut x = VehicleState {
            velocity: Vec3::new(3.0, -2.0, 1.0),
            ..Default::default()
        };
        let no_gravity = VehicleParams { gravity: 0.0, ..p.clone() };
        let mut energy = 0.5 * p.mass * x.velocity.norm_squared();
        for _ in 0..1000 {
            x = rk4_step(&x, &Wrench::default(), 1e-3, &no_gravity).unwrap();
            let e = 0.5 * p.mass * x.velocity.norm_squared();
            assert!(e <= energy);
            energy = e;
        }
    }

    #[test]
    fn tracked_rotation_matches_euler_angles() {
        let p = params();
        let w = Wrench::new(p.mass * p.gravity, Vec3::new(0.05, -0.03, 0.02));
        let mut x = VehicleState {
            euler_rates: Vec3::new(2.0, -0.5, 0.7),
            ..Default::default()
        };
        for _ in 0..1000 {
            x = rk4_step(&x, &w, 1e-3, &p).unwrap();
            let rebuilt = euler_to_rotation(x.euler.x, x.euler.y, x.euler.z);
            assert!((rebuilt.matrix() - x.rotation.matrix()).norm() < 1e-6);
        }
        assert_relative_eq!(x.body_rates(), euler_rate_map(&x.euler) * x.euler_rates);
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = params();
        assert!(rk4_step(&VehicleState::default(), &Wrench::default(), 0.0, &p).is_err());
    }
}
