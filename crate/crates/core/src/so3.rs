//! Rotation-group primitives.
//!
//! Matrices use the usual `(row, col)` indexing of nalgebra: `r[(i, j)]` is
//! row `i`, column `j`, so `r.column(2)` is the body z-axis expressed in the
//! inertial frame. Euler angles are roll `phi`, pitch `theta`, yaw `psi` in the
//! Z-Y-X composition `R = Rz(psi) * Ry(theta) * Rx(phi)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance for accepting a matrix as a member of SO(3).
pub const ROTATION_TOL: f64 = 1e-9;
/// Tolerance on the symmetric part accepted by [`vee`].
pub const SKEW_TOL: f64 = 1e-9;

pub fn hat(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds [`SKEW_TOL`].
pub fn vee(m: &Matrix3<f64>) -> Result<Vec3> {
    let sym = (m + m.transpose()).norm();
    if sym >= SKEW_TOL {
        return Err(Error::NotSkew(sym));
    }
    Ok(vee_unchecked(m))
}

/// Reads the skew entries of `m` without validating.
pub fn vee_unchecked(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let r = Rotation(m);
        let orthonormality = r.orthonormality_error();
        let det = m.determinant();
        if !(orthonormality < ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::NotRotation { orthonormality, det });
        }
        Ok(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// `||R^T R - I||_F`
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Rotation about a unit axis by `angle` radians.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Rotation {
        let n = axis.norm();
        if n == 0.0 {
            return Rotation::identity();
        }
        exp_map(&(axis * (angle / n)))
    }

    /// Recovers Z-Y-X Euler angles `(phi, theta, psi)`.
    pub fn to_euler(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let theta = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let phi = m[(2, 1)].atan2(m[(2, 2)]);
        let psi = m[(1, 0)].atan2(m[(0, 0)]);
        (phi, theta, psi)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Builds `Rz(psi) Ry(theta) Rx(phi)` column by column.
pub fn euler_to_rotation(phi: f64, theta: f64, psi: f64) -> Rotation {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let c1 = Vec3::new(ct * cp, ct * sp, -st);
    let c2 = Vec3::new(-sp * cf + st * sf * cp, sf * sp * st + cp * cf, sf * ct);
    let c3 = Vec3::new(st * cf * cp + sp * sf, -cp * sf + cf * sp * st, cf * ct);
    Rotation(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Rodrigues formula for `exp(hat(w))`.
pub fn exp_map(w: &Vec3) -> Rotation {
    let angle = w.norm();
    let k = hat(w);
    let (a, b) = if angle < 1e-8 {
        // Taylor coefficients of sin(x)/x and (1 - cos x)/x^2
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Nearest rotation in the Frobenius sense (polar factor).
pub fn reorthonormalize(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Rotation(r)
}

/// Advances `R' = R hat(omega)` over one step of length `h` using the
/// exponential map, then projects back onto SO(3).
pub fn integrate_rotation(r: &Rotation, omega: &Vec3, h: f64) -> Rotation {
    let step = exp_map(&(omega * h));
    reorthonormalize(&(r.0 * step.0))
}

/// Inverse of the left-trivialised differential of `exp`, truncated after the
/// second bracket. Sufficient for fourth-order Munthe-Kaas stages.
pub fn dexp_inv(sigma: &Vec3, v: &Vec3) -> Vec3 {
    let c1 = sigma.cross(v);
    v - c1 * 0.5 + sigma.cross(&c1) / 12.0
}
