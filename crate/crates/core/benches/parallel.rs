//! Sequential versus data-parallel execution of the heavy loops. Both
//! strategies produce identical output; only wall time differs. Without the
//! `parallel` feature the parallel arm falls back to sequential.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hunter_core::eval_metrics::{evaluate, EvalConfig};
use hunter_core::exec::Execution;
use hunter_core::geometry::{BBox3D, Detection, RigidTransform, Vec3};
use hunter_core::ground_seg::{segment_ground_with, RansacConfig};
use hunter_core::lidar_sim::{cast_rays, generate_humanoid, HumanoidParams, SimOptions};
use hunter_core::toy::{render_frame, layout, ToyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_raycast(c: &mut Criterion) {
    let toy = ToyConfig::default();
    let asset = generate_humanoid(&HumanoidParams::default());
    let mesh = asset.mesh().transformed(&RigidTransform::from_yaw_translation(0.4, Vec3::new(8.0, 2.0, -1.7)));
    let mut g = c.benchmark_group("raycast_human");
    for (name, exec) in MODES {
        let opts = SimOptions { exec, ..SimOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| cast_rays(black_box(std::slice::from_ref(&mesh)), &toy.lidar, &opts))
        });
    }
    g.finish();
}

fn bench_ground(c: &mut Criterion) {
    let toy = ToyConfig::default();
    let frame = render_frame(&toy, &layout(&toy, 0), 0, 0, Execution::default());
    let cfg = RansacConfig::default();
    let mut g = c.benchmark_group("segment_ground");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| segment_ground_with(black_box(&frame.cloud), &cfg, exec))
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let human = Vec3::new(0.6, 0.6, 1.7);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for f in 0..500 {
        let g: Vec<BBox3D> = (0..8)
            .map(|_| BBox3D::new(Vec3::new(r.random_range(-12.0..12.0), r.random_range(-25.0..25.0), 0.0), human, 0.0).unwrap())
            .collect();
        let d: Vec<Detection> = g
            .iter()
            .map(|b| {
                let c = b.center() + Vec3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), 0.0);
                Detection::new(f, BBox3D::new(c, human, 0.0).unwrap(), r.random()).unwrap()
            })
            .collect();
        gts.push(g);
        dets.push(d);
    }
    let mut g = c.benchmark_group("evaluate_500_frames");
    for (name, exec) in MODES {
        let cfg = EvalConfig { exec, ..EvalConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(black_box(&dets), &gts, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_raycast, bench_ground, bench_eval);
criterion_main!(benches);
