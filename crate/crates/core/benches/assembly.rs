use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use polyreg::field::{energy_and_gradient, energy_with, MatrixField};
use polyreg::grid::Grid;
use polyreg::integrands::{Integrand, RotationEnergy};
use polyreg::parallel::Execution;
use polyreg::registration::{blob_image, default_blobs, rotation_field, warp};
use polyreg::solver::{Objective, TikhonovProblem};

const POLICIES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn disk(n: usize) -> Grid {
    Grid::new([-1.0, -1.0], [1.0, 1.0], n, n)
        .unwrap()
        .with_disk([0.0, 0.0], 1.0)
        .unwrap()
}

fn energy_assembly(c: &mut Criterion) {
    let f = RotationEnergy::new(4.0).unwrap();
    let mut group = c.benchmark_group("energy");
    for n in [64, 128] {
        let u = rotation_field(0.4, &disk(n)).field;
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, n), &u, |b, u| {
                b.iter(|| energy_with(black_box(u), &f, exec).unwrap().value)
            });
        }
    }
    group.finish();

    let mut group = c.benchmark_group("energy_gradient");
    for n in [64, 128] {
        let u = rotation_field(0.4, &disk(n)).field;
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, n), &u, |b, u| {
                b.iter(|| energy_and_gradient(black_box(u), &f, exec).unwrap().0)
            });
        }
    }
    group.finish();
}

fn tikhonov_objective(c: &mut Criterion) {
    let g = disk(64);
    let f: Arc<dyn Integrand> = Arc::new(RotationEnergy::new(4.0).unwrap());
    let reference = blob_image(&g, &default_blobs());
    let u_r = rotation_field(0.5, &g).field;
    let data = warp(&reference, &u_r).unwrap();
    let start = MatrixField::identity(&g);
    let mut group = c.benchmark_group("tikhonov_objective");
    for (name, exec) in POLICIES {
        let p = TikhonovProblem::new(f.clone(), reference.clone(), data.clone(), 2.0, 0.01, start.clone())
            .unwrap()
            .with_execution(exec);
        let x = start.values().to_vec();
        let mut grad = vec![0.0; x.len()];
        group.bench_function(name, |b| b.iter(|| p.evaluate(black_box(&x), &mut grad).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, energy_assembly, tikhonov_objective);
criterion_main!(benches);
