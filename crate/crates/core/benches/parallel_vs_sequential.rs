use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gflm::basis::fourier_basis;
use gflm::glm::SolverConfig;
use gflm::link::LinkSpec;
use gflm::par::Execution;
use gflm::select::{loo_predictions, Method};
use gflm::sim::{generate_sample, power_experiment, SimDesign};
use gflm::smooth::{local_poly_smooth_with, Kernel, SmootherConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("parallel", Execution::Parallel),
    ("sequential", Execution::Sequential),
];

fn power(c: &mut Criterion) {
    let mut group = c.benchmark_group("power_experiment");
    group.sample_size(10);
    let design = SimDesign {
        n_reps: 64,
        grid_size: 51,
        ..SimDesign::default()
    };
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| power_experiment(black_box(&design), &[0.0, 0.5], &[100], 0.05, exec).unwrap())
        });
    }
    group.finish();
}

fn leave_one_out(c: &mut Criterion) {
    let mut group = c.benchmark_group("loo_predictions");
    group.sample_size(10);
    let solver = SolverConfig::default();
    let method = Method::Known(LinkSpec::logit());
    for n in [100, 400] {
        let design = SimDesign {
            n,
            n_reps: 1,
            grid_size: 51,
            ..SimDesign::default()
        };
        let ds = generate_sample(&design).unwrap();
        let basis = fourier_basis(4, ds.grid()).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &ds, |b, ds| {
                b.iter(|| loo_predictions(ds, &basis, 3, &method, &solver, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn smoother(c: &mut Criterion) {
    let mut group = c.benchmark_group("local_poly_smooth");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5000;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.3 * rng.random::<f64>()).collect();
    let at: Vec<f64> = (0..400).map(|k| -3.0 + 6.0 * k as f64 / 399.0).collect();
    let cfg = SmootherConfig::new(0.3, 2, Kernel::Epanechnikov).unwrap();
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| local_poly_smooth_with(black_box(&x), &y, &at, &cfg, 1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, power, leave_one_out, smoother);
criterion_main!(benches);
