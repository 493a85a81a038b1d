use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use vpflip::flight::{attitude_sdc, FlipSchedule};
use vpflip::mission::{build_controller, solve_offline, ControllerKind, MissionConfig};
use vpflip::so3::{euler_to_rotation, Vec3};
use vpflip::VehicleState;

fn control_step(c: &mut Criterion) {
    let mut cfg = MissionConfig::nominal();
    cfg.flip = FlipSchedule::none(2.0);
    let bundle = solve_offline(&cfg).unwrap();
    let euler = Vec3::new(0.4, -0.2, 0.1);
    let x = VehicleState {
        euler,
        euler_rates: Vec3::new(0.5, -0.3, 0.2),
        rotation: euler_to_rotation(euler.x, euler.y, euler.z),
        ..VehicleState::default()
    };
    let z = DVector::from_vec(vec![0.2, -0.1, 0.05, 0.3, -0.2, 0.1]);
    let mut group = c.benchmark_group("attitude_control_step");
    for kind in [ControllerKind::ThetaD, ControllerKind::Sdre] {
        let controller = build_controller(&cfg, kind, &bundle).unwrap();
        group.bench_function(kind.name(), |b| {
            b.iter(|| {
                let (a, bx) = attitude_sdc(&x, &cfg.vehicle).unwrap();
                black_box(controller.control(&a, &bx, 0.7, &z).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, control_step);
criterion_main!(benches);
