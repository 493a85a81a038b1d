use std::sync::OnceLock;

use vpflip::flight::FlipSchedule;
use vpflip::mission::{
    compute_metrics, emit_outputs, run_mission_with, solve_offline, trajectory_csv, ControllerKind, MissionConfig, MissionLog,
    ScheduleBundle, SUMMARY_KEYS, TRAJECTORY_HEADER,
};

/// Two-second flip mission, short enough for repeated runs.
fn short_flip() -> MissionConfig {
    let mut cfg = MissionConfig::nominal();
    cfg.flip = FlipSchedule { t1: 0.6, t2: 1.0, t_final: 2.0, phi_f: std::f64::consts::PI };
    cfg.timing_warmup = 10;
    cfg
}

fn bundle() -> &'static ScheduleBundle {
    static BUNDLE: OnceLock<ScheduleBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| solve_offline(&short_flip()).unwrap())
}

fn run(cfg: &MissionConfig, kind: ControllerKind) -> MissionLog {
    run_mission_with(cfg, kind, bundle()).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = short_flip();
    for kind in [ControllerKind::ThetaD, ControllerKind::Sdre] {
        let a = run(&cfg, kind);
        let b = run(&cfg, kind);
        assert_eq!(trajectory_csv(&a), trajectory_csv(&b));
    }
}

#[test]
fn timestamps_and_row_count() {
    let cfg = short_flip();
    let log = run(&cfg, ControllerKind::ThetaD);
    assert_eq!(log.records.len(), (cfg.t_final() / cfg.step).ceil() as usize + 1);
    for (k, r) in log.records.iter().enumerate() {
        assert_eq!(r.t, k as f64 * cfg.step);
    }
    let csv = trajectory_csv(&log);
    assert_eq!(csv.lines().count(), log.records.len() + 1);
    assert_eq!(csv.lines().next().unwrap(), TRAJECTORY_HEADER);
    let columns = TRAJECTORY_HEADER.split(',').count();
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == columns));
}

#[test]
fn energy_matches_recomputation() {
    let log = run(&short_flip(), ControllerKind::Sdre);
    let s = compute_metrics(&log).unwrap();
    let sq: Vec<f64> = log.records.iter().map(|r| r.control_vector().iter().map(|v| v * v).sum()).collect();
    let mut direct = 0.0;
    for w in sq.windows(2) {
        direct += 0.5 * (w[0] + w[1]) * log.dt;
    }
    assert!(s.control_energy >= 0.0);
    assert!((s.control_energy - direct).abs() <= 1e-12 * direct);
}

#[test]
fn outputs_follow_schema() {
    let log = run(&short_flip(), ControllerKind::ThetaD);
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_outputs(&log, dir.path()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths.summary).unwrap()).unwrap();
    let keys: Vec<&str> = summary.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = SUMMARY_KEYS.to_vec();
    expected.sort_unstable();
    let mut keys = keys;
    keys.sort_unstable();
    assert_eq!(keys, expected);
    assert!(summary["series"]["max_lyapunov_residual"].as_f64().unwrap() < 1e-8);
    let script = std::fs::read_to_string(&paths.plot).unwrap();
    assert!(script.contains("trajectory.csv"));
    assert_eq!(std::fs::read_to_string(&paths.timing).unwrap().lines().count(), log.records.len() + 1);
}

#[test]
fn frozen_attitude_gives_same_translational_stream() {
    let mut cfg = short_flip();
    cfg.frozen_attitude = true;
    let a = run(&cfg, ControllerKind::ThetaD);
    let b = run(&cfg, ControllerKind::Sdre);
    assert!(a.records.iter().zip(&b.records).any(|(x, y)| x.torque_cmd != y.torque_cmd));
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.euler, y.euler);
        assert_eq!(x.position, y.position);
        assert_eq!(x.u_translational, y.u_translational, "t = {}", x.t);
        assert_eq!(x.thrust_cmd, y.thrust_cmd);
    }
}
