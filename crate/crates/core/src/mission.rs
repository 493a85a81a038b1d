//! Closed-loop flip missions: configuration, simulation loop, metrics and
//! output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, AllocationConfig, WarmStart};
use crate::error::{Error, Result};
use crate::flight::{
    attitude_errors, attitude_nominal, attitude_sdc, recover_thrust, translational_control, translational_gain, translational_state,
    AntipodalPolicy, AttitudeController, DesiredAttitude, FlipSchedule, Penalties, PhiDesMode, TranslationalSetpoint,
};
use crate::sdre::{SdreConfig, SdreController};
use crate::so3::{euler_to_rotation, Vec3};
use crate::theta_d::{grid_intervals, lyapunov_residual, rho, solve_t0, GainSchedule, GainScheduleFile, ThetaDConfig, ThetaDController};
use crate::vehicle::{rk4_step, VehicleParams, VehicleState, Wrench};

const NOMINAL: &str = include_str!("../configs/nominal.json");

/// Wrapped roll deviation below which a flip counts as completed.
pub const FLIP_THRESHOLD: f64 = 0.3;
/// Length of the window after `t2` checked for flip completion, s.
pub const FLIP_WINDOW: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    ThetaD,
    Sdre,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::ThetaD => "theta_d",
            ControllerKind::Sdre => "sdre",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerSelection {
    #[default]
    ThetaD,
    Sdre,
    Both,
}

impl ControllerSelection {
    pub fn kinds(self) -> Vec<ControllerKind> {
        match self {
            ControllerSelection::ThetaD => vec![ControllerKind::ThetaD],
            ControllerSelection::Sdre => vec![ControllerKind::Sdre],
            ControllerSelection::Both => vec![ControllerKind::ThetaD, ControllerKind::Sdre],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(default)]
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub euler: [f64; 3],
    #[serde(default)]
    pub euler_rates: [f64; 3],
}

impl InitialState {
    pub fn to_state(&self) -> VehicleState {
        let euler = Vec3::from(self.euler);
        VehicleState {
            position: Vec3::from(self.position),
            velocity: Vec3::from(self.velocity),
            euler,
            euler_rates: Vec3::from(self.euler_rates),
            rotation: euler_to_rotation(euler.x, euler.y, euler.z),
        }
    }
}

fn default_warmup() -> usize {
    200
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionConfig {
    pub vehicle: VehicleParams,
    pub translational: Penalties,
    pub attitude: Penalties,
    #[serde(default)]
    pub theta_d: ThetaDConfig,
    #[serde(default)]
    pub sdre: SdreConfig,
    /// Flip window and mission horizon.
    pub flip: FlipSchedule,
    #[serde(default)]
    pub initial_state: InitialState,
    pub target: TranslationalSetpoint,
    #[serde(default)]
    pub psi_des: f64,
    /// Control and integration step, s.
    pub step: f64,
    /// Knot spacing of the offline schedules, s. Defaults to `step`.
    #[serde(default)]
    pub riccati_step: Option<f64>,
    #[serde(default)]
    pub controller: ControllerSelection,
    #[serde(default)]
    pub allocation: AllocationConfig,
    #[serde(default)]
    pub phi_des_mode: PhiDesMode,
    #[serde(default)]
    pub antipodal_policy: AntipodalPolicy,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Seed for randomised scenarios; nominal missions do not draw from it.
    #[serde(default)]
    pub seed: u64,
    /// Test mode: pin the attitude to its reference and feed the plant the
    /// commanded thrust with zero torque.
    #[serde(default)]
    pub frozen_attitude: bool,
    /// Untimed controller evaluations before the mission starts.
    #[serde(default = "default_warmup")]
    pub timing_warmup: usize,
    /// Invert the Lyapunov operators of every knot before the mission.
    #[serde(default = "default_true")]
    pub prefactor_lyapunov: bool,
}

impl MissionConfig {
    /// The shipped nominal flip mission.
    pub fn nominal() -> Self {
        serde_json::from_str(NOMINAL).expect("embedded nominal config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: MissionConfig = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io(Error::io(path, e)))?;
        MissionConfig::from_json(&text).map_err(LoadError::Config)
    }

    pub fn t_final(&self) -> f64 {
        self.flip.t_final
    }

    pub fn riccati_step(&self) -> f64 {
        self.riccati_step.unwrap_or(self.step)
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.translational.validate(6, 3)?;
        self.attitude.validate(6, 3)?;
        self.theta_d.validate()?;
        self.flip.validate()?;
        self.allocation.validate()?;
        grid_intervals(self.t_final(), self.step)?;
        grid_intervals(self.t_final(), self.riccati_step())?;
        let finite = self.target.position.iter().chain(&self.target.velocity).all(|v| v.is_finite())
            && self.psi_des.is_finite();
        if !finite {
            return Err(Error::InvalidParameter("target and heading must be finite".into()));
        }
        Ok(())
    }
}

/// Failure to obtain a config: unreadable file or invalid content.
#[derive(Debug)]
pub enum LoadError {
    Io(Error),
    Config(Error),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Io(e) | LoadError::Config(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for LoadError {}

/// Offline `T0` schedules of both subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleBundle {
    pub translational: GainSchedule,
    pub attitude: GainSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBundleFile {
    pub translational: GainScheduleFile,
    pub attitude: GainScheduleFile,
}

impl ScheduleBundle {
    pub fn to_json(&self) -> String {
        let file = ScheduleBundleFile {
            translational: (&self.translational).into(),
            attitude: (&self.attitude).into(),
        };
        serde_json::to_string(&file).expect("schedules serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleBundleFile = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("schedule file: {e}")))?;
        Ok(ScheduleBundle {
            translational: file.translational.try_into()?,
            attitude: file.attitude.try_into()?,
        })
    }

    /// Checks that the schedules belong to `cfg`.
    pub fn check_against(&self, cfg: &MissionConfig) -> Result<()> {
        let fresh_a0 = attitude_nominal(&cfg.vehicle).0;
        let ok = (self.attitude.t_final - cfg.t_final()).abs() < 1e-12
            && (self.translational.t_final - cfg.t_final()).abs() < 1e-12
            && self.attitude.a0 == fresh_a0
            && self.attitude.q == cfg.attitude.q_matrix()
            && self.translational.q == cfg.translational.q_matrix();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("schedule file does not match the mission config".into()))
        }
    }
}

/// Solves both backward Riccati equations of the mission.
pub fn solve_offline(cfg: &MissionConfig) -> Result<ScheduleBundle> {
    cfg.validate()?;
    let h = cfg.riccati_step();
    let translational = translational_gain(&cfg.translational, &cfg.vehicle, cfg.t_final(), h)?;
    let (a0, b0) = attitude_nominal(&cfg.vehicle);
    let pen = &cfg.attitude;
    let attitude = solve_t0(&a0, &b0, &pen.q_matrix(), &pen.r_matrix(), &pen.s_matrix(), cfg.t_final(), h)?;
    Ok(ScheduleBundle { translational, attitude })
}

pub fn build_controller(cfg: &MissionConfig, kind: ControllerKind, bundle: &ScheduleBundle) -> Result<AttitudeController> {
    Ok(match kind {
        ControllerKind::ThetaD => AttitudeController::ThetaD(Box::new(ThetaDController::new(
            bundle.attitude.clone(),
            cfg.theta_d.clone(),
            cfg.prefactor_lyapunov,
        )?)),
        ControllerKind::Sdre => {
            let pen = &cfg.attitude;
            AttitudeController::Sdre(Box::new(SdreController::new(
                pen.q_matrix(),
                pen.r_matrix(),
                pen.s_matrix(),
                cfg.t_final(),
                cfg.sdre.clone(),
            )?))
        }
    })
}

/// One logged control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub euler: [f64; 3],
    pub euler_rates: [f64; 3],
    pub body_rates: [f64; 3],
    pub u_translational: [f64; 3],
    pub thrust_cmd: f64,
    pub torque_cmd: [f64; 3],
    pub thrust_ach: f64,
    pub torque_ach: [f64; 3],
    pub blade_angles: [f64; 4],
    pub saturated: bool,
    pub roll_ref: f64,
    pub pitch_ref: f64,
    pub e_r: [f64; 3],
    pub e_omega: [f64; 3],
    pub error_function: f64,
    pub guarded: bool,
    pub orthonormality_error: f64,
    pub det_error: f64,
    /// Wall time of the attitude gain computation, s.
    pub control_seconds: f64,
}

impl StepRecord {
    /// Stacked command `(u_t, tau)` whose squared norm is the energy integrand.
    pub fn control_vector(&self) -> [f64; 6] {
        let u = self.u_translational;
        let tau = self.torque_cmd;
        [u[0], u[1], u[2], tau[0], tau[1], tau[2]]
    }
}

/// Numerical health of the theta-D series over a mission.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeriesDiagnostics {
    pub max_lyapunov_residual: f64,
    pub min_perturbed_penalty_eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionLog {
    pub controller: String,
    pub dt: f64,
    pub target: [f64; 3],
    pub flip: FlipSchedule,
    pub records: Vec<StepRecord>,
    pub series: Option<SeriesDiagnostics>,
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Runs one mission, solving the offline schedules first.
pub fn run_mission(cfg: &MissionConfig, kind: ControllerKind) -> Result<MissionLog> {
    let bundle = solve_offline(cfg)?;
    run_mission_with(cfg, kind, &bundle)
}

/// Runs one mission on precomputed schedules.
pub fn run_mission_with(cfg: &MissionConfig, kind: ControllerKind, bundle: &ScheduleBundle) -> Result<MissionLog> {
    cfg.validate()?;
    let p = &cfg.vehicle;
    let h = cfg.step;
    let steps = grid_intervals(cfg.t_final(), h)?;
    let controller = build_controller(cfg, kind, bundle)?;
    let mut desired = DesiredAttitude::new(cfg.flip.clone(), cfg.psi_des, cfg.phi_des_mode, p.gravity, h);
    let mut x = cfg.initial_state.to_state();
    let mut warm = WarmStart::hover(p);
    let mut records = Vec::with_capacity(steps + 1);
    let mut series = match kind {
        ControllerKind::ThetaD => Some(SeriesDiagnostics { max_lyapunov_residual: 0.0, min_perturbed_penalty_eig: f64::INFINITY }),
        ControllerKind::Sdre => None,
    };

    // untimed warm-up on the initial state
    if cfg.timing_warmup > 0 {
        let (a_a, b_a) = attitude_sdc(&x, p)?;
        let z = nalgebra::DVector::zeros(6);
        for _ in 0..cfg.timing_warmup {
            std::hint::black_box(controller.control(&a_a, &b_a, 0.0, &z)?);
        }
    }

    for k in 0..=steps {
        let t = k as f64 * h;
        let at = |e: Error| e.at_step(k, t);
        let u_t = translational_control(&translational_state(&x), &cfg.target, &bundle.translational, t).map_err(at)?;
        let thrust = recover_thrust(&u_t, &x.rotation, p);
        let reference = desired.update(&u_t, t).map_err(at)?;
        let errors = attitude_errors(&x, &reference, cfg.antipodal_policy).map_err(at)?;

        let clock = Instant::now();
        let (a_a, b_a) = attitude_sdc(&x, p).map_err(at)?;
        let command = controller.control(&a_a, &b_a, t, &errors.stacked()).map_err(at)?;
        let control_seconds = clock.elapsed().as_secs_f64();

        if let (Some(diag), Some(terms), AttitudeController::ThetaD(c)) = (series.as_mut(), command.terms.as_ref(), &controller) {
            let r1 = lyapunov_residual(&terms.a_cl, &terms.t1, &(&terms.bracket1 * rho(1, t, &c.cfg)));
            let r2 = lyapunov_residual(&terms.a_cl, &terms.t2, &(&terms.bracket2 * rho(2, t, &c.cfg)));
            for r in [r1, r2] {
                // an all-zero right-hand side leaves the relative residual undefined
                if r.is_finite() {
                    diag.max_lyapunov_residual = diag.max_lyapunov_residual.max(r);
                }
            }
            diag.min_perturbed_penalty_eig = diag.min_perturbed_penalty_eig.min(c.perturbed_penalty_min_eig(terms, t));
        }

        let wrench = Wrench::new(thrust, command.torque);
        let alloc = allocate(&wrench, &cfg.allocation, p, &warm).map_err(at)?;
        warm = alloc.solution.warm_start();

        records.push(StepRecord {
            t,
            position: arr3(&x.position),
            velocity: arr3(&x.velocity),
            euler: arr3(&x.euler),
            euler_rates: arr3(&x.euler_rates),
            body_rates: arr3(&x.body_rates()),
            u_translational: arr3(&u_t),
            thrust_cmd: thrust,
            torque_cmd: arr3(&command.torque),
            thrust_ach: alloc.achievable.thrust,
            torque_ach: arr3(&alloc.achievable.torque),
            blade_angles: alloc.blade_angles,
            saturated: alloc.saturated.iter().any(|s| *s),
            roll_ref: reference.roll,
            pitch_ref: reference.pitch,
            e_r: arr3(&errors.e_r),
            e_omega: arr3(&errors.e_omega),
            error_function: errors.e,
            guarded: errors.guarded,
            orthonormality_error: x.rotation.orthonormality_error(),
            det_error: (x.rotation.determinant() - 1.0).abs(),
            control_seconds,
        });

        if k < steps {
            let applied = if cfg.frozen_attitude {
                // attitude pinned to the reference and held through the step;
                // the commanded thrust bypasses allocation round-off
                x.euler = Vec3::new(reference.roll, reference.pitch, cfg.psi_des);
                x.euler_rates = Vec3::zeros();
                x.rotation = reference.rotation;
                Wrench::new(thrust, Vec3::zeros())
            } else {
                alloc.achievable
            };
            x = rk4_step(&x, &applied, h, p).map_err(at)?;
        }
    }

    Ok(MissionLog {
        controller: controller.name().to_string(),
        dt: h,
        target: cfg.target.position,
        flip: cfg.flip.clone(),
        records,
        series,
    })
}

/// Runs independent missions one after another.
pub fn run_missions_seq(cfg: &MissionConfig, kinds: &[ControllerKind], bundle: &ScheduleBundle) -> Vec<Result<MissionLog>> {
    kinds.iter().map(|k| run_mission_with(cfg, *k, bundle)).collect()
}

/// Runs independent missions on the rayon pool. Each mission stays single-threaded.
#[cfg(feature = "parallel")]
pub fn run_missions_par(cfg: &MissionConfig, kinds: &[ControllerKind], bundle: &ScheduleBundle) -> Vec<Result<MissionLog>> {
    use rayon::prelude::*;
    kinds.par_iter().map(|k| run_mission_with(cfg, *k, bundle)).collect()
}

pub fn run_missions(cfg: &MissionConfig, kinds: &[ControllerKind], bundle: &ScheduleBundle) -> Vec<Result<MissionLog>> {
    #[cfg(feature = "parallel")]
    {
        run_missions_par(cfg, kinds, bundle)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_missions_seq(cfg, kinds, bundle)
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Trapezoidal integral of `values` sampled at `dt`.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, inner @ .., last] => dt * (0.5 * (first + last) + inner.iter().sum::<f64>()),
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub controller: String,
    pub steps: usize,
    pub dt: f64,
    pub t_final: f64,
    pub control_energy: f64,
    pub final_position: [f64; 3],
    pub final_position_error: f64,
    pub flip_completed: bool,
    pub flip_max_roll_deviation: f64,
    pub step_time_mean_s: f64,
    pub step_time_std_s: f64,
    pub max_orthonormality_error: f64,
    pub max_det_error: f64,
    pub saturated_steps: usize,
    pub guarded_steps: usize,
    pub series: Option<SeriesDiagnostics>,
}

/// Summary keys in serialisation order.
pub const SUMMARY_KEYS: [&str; 16] = [
    "controller",
    "steps",
    "dt",
    "t_final",
    "control_energy",
    "final_position",
    "final_position_error",
    "flip_completed",
    "flip_max_roll_deviation",
    "step_time_mean_s",
    "step_time_std_s",
    "max_orthonormality_error",
    "max_det_error",
    "saturated_steps",
    "guarded_steps",
    "series",
];

/// Control energy of a log: trapezoid of `|(u_t, tau)|^2`.
pub fn control_energy(log: &MissionLog) -> f64 {
    let sq: Vec<f64> = log.records.iter().map(|r| r.control_vector().iter().map(|v| v * v).sum()).collect();
    trapezoid(&sq, log.dt)
}

/// Largest wrapped `|roll - phi_f|` within `[t2, t2 + FLIP_WINDOW]`, or `None`
/// if the log has no samples there.
pub fn flip_deviation(log: &MissionLog) -> Option<f64> {
    let (start, end) = (log.flip.t2, log.flip.t2 + FLIP_WINDOW);
    log.records
        .iter()
        .filter(|r| r.t >= start - 1e-12 && r.t <= end + 1e-12)
        .map(|r| wrap_angle(r.euler[0] - log.flip.phi_f).abs())
        .reduce(f64::max)
}

pub fn compute_metrics(log: &MissionLog) -> Result<Summary> {
    let last = log.records.last().ok_or_else(|| Error::InvalidParameter("empty mission log".into()))?;
    let times: Vec<f64> = log.records.iter().map(|r| r.control_seconds).collect();
    let (mean, std) = mean_std(&times);
    let final_position_error = (Vec3::from(last.position) - Vec3::from(log.target)).norm();
    let deviation = flip_deviation(log);
    Ok(Summary {
        controller: log.controller.clone(),
        steps: log.records.len() - 1,
        dt: log.dt,
        t_final: last.t,
        control_energy: control_energy(log),
        final_position: last.position,
        final_position_error,
        flip_completed: deviation.is_some_and(|d| d < FLIP_THRESHOLD),
        flip_max_roll_deviation: deviation.unwrap_or(f64::NAN),
        step_time_mean_s: mean,
        step_time_std_s: std,
        max_orthonormality_error: log.records.iter().map(|r| r.orthonormality_error).fold(0.0, f64::max),
        max_det_error: log.records.iter().map(|r| r.det_error).fold(0.0, f64::max),
        saturated_steps: log.records.iter().filter(|r| r.saturated).count(),
        guarded_steps: log.records.iter().filter(|r| r.guarded).count(),
        series: log.series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub controller_a: String,
    pub controller_b: String,
    pub energy_a: f64,
    pub energy_b: f64,
    /// `|E_a - E_b| / max(E_a, E_b)`
    pub energy_relative_difference: f64,
    pub step_time_mean_a_s: f64,
    pub step_time_mean_b_s: f64,
    /// Mean step time of `a` over that of `b`.
    pub step_time_ratio: f64,
    pub final_position_error_a: f64,
    pub final_position_error_b: f64,
}

pub fn compare(a: &Summary, b: &Summary) -> Comparison {
    let denom = a.control_energy.max(b.control_energy);
    Comparison {
        controller_a: a.controller.clone(),
        controller_b: b.controller.clone(),
        energy_a: a.control_energy,
        energy_b: b.control_energy,
        energy_relative_difference: if denom > 0.0 { (a.control_energy - b.control_energy).abs() / denom } else { 0.0 },
        step_time_mean_a_s: a.step_time_mean_s,
        step_time_mean_b_s: b.step_time_mean_s,
        step_time_ratio: a.step_time_mean_s / b.step_time_mean_s,
        final_position_error_a: a.final_position_error,
        final_position_error_b: b.final_position_error,
    }
}

/// Trajectory CSV columns.
pub const TRAJECTORY_HEADER: &str = "t,x,y,z,vx,vy,vz,roll,pitch,yaw,roll_rate,pitch_rate,yaw_rate,p,q,r,\
ux,uy,uz,thrust_cmd,tau_x_cmd,tau_y_cmd,tau_z_cmd,thrust_ach,tau_x_ach,tau_y_ach,tau_z_ach,\
alpha1,alpha2,alpha3,alpha4,saturated,roll_ref,pitch_ref,e_r_x,e_r_y,e_r_z,e_w_x,e_w_y,e_w_z,error_function,guarded";

/// Deterministic trajectory CSV; wall-clock timings are kept out of it.
pub fn trajectory_csv(log: &MissionLog) -> String {
    let mut out = String::with_capacity(log.records.len() * 400);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in &log.records {
        let mut cols: Vec<f64> = vec![r.t];
        for a in [r.position, r.velocity, r.euler, r.euler_rates, r.body_rates, r.u_translational] {
            cols.extend(a);
        }
        cols.push(r.thrust_cmd);
        cols.extend(r.torque_cmd);
        cols.push(r.thrust_ach);
        cols.extend(r.torque_ach);
        cols.extend(r.blade_angles);
        cols.push(r.saturated as u8 as f64);
        cols.push(r.roll_ref);
        cols.push(r.pitch_ref);
        cols.extend(r.e_r);
        cols.extend(r.e_omega);
        cols.push(r.error_function);
        cols.push(r.guarded as u8 as f64);
        let line: Vec<String> = cols.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn timing_csv(log: &MissionLog) -> String {
    let mut out = String::from("t,control_seconds\n");
    for r in &log.records {
        let _ = writeln!(out, "{:e},{:e}", r.t, r.control_seconds);
    }
    out
}

/// Matplotlib script reading the trajectory CSV next to it.
pub fn plot_script(csv_name: &str) -> String {
    PLOT_TEMPLATE.replace("@CSV@", csv_name)
}

const PLOT_TEMPLATE: &str = r#"#!/usr/bin/env python3
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

here = os.path.dirname(os.path.abspath(__file__))
path = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "@CSV@")
d = np.genfromtxt(path, delimiter=",", names=True)
t = d["t"]


def panel(name, cols, labels, ylabel):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for c, lab in zip(cols, labels):
        ax.plot(t, d[c], label=lab)
    ax.set_xlabel("t [s]")
    ax.set_ylabel(ylabel)
    ax.grid(True)
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(here, name + ".png"), dpi=120)
    plt.close(fig)


panel("position", ["x", "y", "z"], ["x", "y", "z"], "position [m]")
panel("attitude", ["roll", "pitch", "yaw", "roll_ref"], ["roll", "pitch", "yaw", "roll ref"], "angle [rad]")
panel("velocity", ["vx", "vy", "vz"], ["vx", "vy", "vz"], "velocity [m/s]")
panel("angular_velocity", ["p", "q", "r"], ["p", "q", "r"], "body rate [rad/s]")
panel("thrust", ["thrust_cmd", "thrust_ach"], ["commanded", "achieved"], "thrust [N]")
panel("torque", ["tau_x_cmd", "tau_y_cmd", "tau_z_cmd"], ["x", "y", "z"], "torque [N m]")


def rot(phi, theta, psi):
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    rz = np.array([[cp, -sp, 0], [sp, cp, 0], [0, 0, 1]])
    ry = np.array([[ct, 0, st], [0, 1, 0], [-st, 0, ct]])
    rx = np.array([[1, 0, 0], [0, cf, -sf], [0, sf, cf]])
    return rz @ ry @ rx


fig = plt.figure(figsize=(7, 6))
ax = fig.add_subplot(projection="3d")
ax.plot(d["x"], d["y"], d["z"], "k-", lw=1)
for i in np.linspace(0, len(t) - 1, 25).astype(int):
    r = rot(d["roll"][i], d["pitch"][i], d["yaw"][i])
    p = np.array([d["x"][i], d["y"][i], d["z"][i]])
    for col, c in zip(range(3), "rgb"):
        e = r[:, col] * 0.3
        ax.plot([p[0], p[0] + e[0]], [p[1], p[1] + e[1]], [p[2], p[2] + e[2]], c)
ax.set_xlabel("x [m]")
ax.set_ylabel("y [m]")
ax.set_zlabel("z [m]")
fig.tight_layout()
fig.savefig(os.path.join(here, "trajectory3d.png"), dpi=120)
"#;

/// Files written for one mission.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub timing: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the trajectory, timing, summary and plot script of `log` under `dir`.
pub fn emit_outputs(log: &MissionLog, dir: &Path) -> Result<OutputPaths> {
    let dir = dir.join(&log.controller);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let summary = compute_metrics(log)?;
    let paths = OutputPaths {
        trajectory: dir.join("trajectory.csv"),
        timing: dir.join("timing.csv"),
        summary: dir.join("summary.json"),
        plot: dir.join("plot.py"),
    };
    write_file(&paths.trajectory, &trajectory_csv(log))?;
    write_file(&paths.timing, &timing_csv(log))?;
    write_file(&paths.summary, &serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
    write_file(&paths.plot, &plot_script("trajectory.csv"))?;
    Ok(paths)
}

pub fn write_comparison(cmp: &Comparison, path: &Path) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(cmp).expect("comparison serialises"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn short(t_final: f64) -> MissionConfig {
        let mut cfg = MissionConfig::nominal();
        cfg.flip = FlipSchedule::none(t_final);
        cfg.target.position = [0.0; 3];
        cfg.step = 1e-3;
        cfg.riccati_step = None;
        cfg.timing_warmup = 2;
        cfg
    }

    #[test]
    fn nominal_config_is_valid() {
        let cfg = MissionConfig::nominal();
        cfg.validate().unwrap();
        assert_eq!(cfg.target.position, [-3.0, 2.0, 1.0]);
        assert_eq!(cfg.theta_d, ThetaDConfig::default());
        assert_eq!(cfg.attitude, Penalties::attitude_default());
        assert_eq!(cfg.translational, Penalties::translational_default());
        assert_eq!(cfg.flip, FlipSchedule::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(NOMINAL).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(MissionConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(NOMINAL).unwrap();
        v["vehicle"]["wings"] = serde_json::json!(2);
        assert!(MissionConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = MissionConfig::nominal();
        cfg.step = 0.3;
        assert!(cfg.validate().is_err());
        let mut cfg = MissionConfig::nominal();
        cfg.vehicle.mass = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trapezoid_and_stats() {
        assert_eq!(trapezoid(&[], 0.1), 0.0);
        assert_relative_eq!(trapezoid(&[2.0; 11], 0.1), 2.0, epsilon = 1e-14);
        assert_relative_eq!(trapezoid(&[0.0, 1.0, 2.0], 1.0), 2.0);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m, 2.5);
        assert_relative_eq!(s, 1.25f64.sqrt());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-0.5), -0.5);
        assert_relative_eq!(wrap_angle(2.0 * PI + 0.1), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn hover_mission_stays_put() {
        let cfg = short(1.0);
        let log = run_mission(&cfg, ControllerKind::ThetaD).unwrap();
        assert_eq!(log.records.len(), 1001);
        let s = compute_metrics(&log).unwrap();
        assert!(s.final_position_error < 1e-3, "{}", s.final_position_error);
        assert!(s.control_energy < 1e-6, "{}", s.control_energy);
        for w in log.records.windows(2) {
            assert!(w[1].t > w[0].t);
        }
    }

    #[test]
    fn summary_keys_match_schema() {
        let log = run_mission(&short(0.05), ControllerKind::ThetaD).unwrap();
        let s = compute_metrics(&log).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = SUMMARY_KEYS.to_vec();
        let mut got = keys.clone();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn energy_matches_recomputation() {
        let mut cfg = short(0.2);
        cfg.target.position = [0.5, -0.2, 0.3];
        let log = run_mission(&cfg, ControllerKind::ThetaD).unwrap();
        let s = compute_metrics(&log).unwrap();
        let mut acc = 0.0;
        for w in log.records.windows(2) {
            let f = |r: &StepRecord| r.control_vector().iter().map(|v| v * v).sum::<f64>();
            acc += 0.5 * (f(&w[0]) + f(&w[1])) * log.dt;
        }
        assert_relative_eq!(s.control_energy, acc, max_relative = 1e-12);
        assert!(s.control_energy > 0.0);
    }

    #[test]
    fn schedule_bundle_round_trip() {
        let cfg = short(0.1);
        let bundle = solve_offline(&cfg).unwrap();
        let back = ScheduleBundle::from_json(&bundle.to_json()).unwrap();
        assert_eq!(back, bundle);
        back.check_against(&cfg).unwrap();
        let mut other = cfg.clone();
        other.attitude.q[0] = 99.0;
        assert!(back.check_against(&other).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let log = run_mission(&short(0.05), ControllerKind::Sdre).unwrap();
        let csv = trajectory_csv(&log);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 51);
        let cols = TRAJECTORY_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
    }

    #[test]
    fn failure_reports_step() {
        let mut cfg = short(0.05);
        cfg.allocation.max_iters = 1;
        cfg.allocation.null_space_fallback = false;
        cfg.target.position = [1.0, 1.0, 1.0];
        match run_mission(&cfg, ControllerKind::ThetaD) {
            Err(Error::Step { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected a step error, got {other:?}"),
        }
    }
}
