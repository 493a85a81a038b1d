//! Finite-time theta-D and SDRE flip control for a variable-pitch quadcopter.
//!
//! The crate is layered bottom-up:
//!
//! * [`so3`]: hat/vee, Euler angles, exponential map and SO(3) integration.
//! * [`vehicle`]: rigid-body plant with signed collective thrust and an RK4 step.
//! * [`allocation`]: wrench to blade-pitch allocation with saturation.
//! * [`theta_d`]: offline Riccati schedule and online Lyapunov series terms.
//! * [`sdre`]: per-step Riccati baseline.
//! * [`flight`]: translational loop, flip reference and geometric attitude errors.
//! * [`mission`]: closed-loop missions, metrics and output files.
//!
//! With the default `parallel` feature, batch allocation, the Kronecker cache
//! and independent missions run on rayon; `--no-default-features` gives the
//! sequential build.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod error;
pub mod flight;
pub mod mission;
pub mod sdre;
pub mod so3;
pub mod theta_d;
pub mod vehicle;

pub use error::{Error, Result};
pub use mission::{run_mission, ControllerKind, MissionConfig, MissionLog};
pub use so3::{Rotation, Vec3};
pub use vehicle::{VehicleParams, VehicleState, Wrench};
