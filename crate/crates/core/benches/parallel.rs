//! Sequential against rayon-parallel execution of the per-round work.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emergent_comm::config::RunConfig;
use emergent_comm::estimators::EstimatorKind;
use emergent_comm::game::make_batch;
use emergent_comm::gradcheck::run_suite;
use emergent_comm::par::Exec;
use emergent_comm::train::{Experiment, RunKind};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn experiment(estimator: EstimatorKind, parallel: bool) -> Experiment {
    let cfg = RunConfig {
        estimator,
        parallel,
        ..RunConfig::default()
    };
    Experiment::new(cfg, RunKind::Plain).unwrap()
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    for estimator in [EstimatorKind::Reinforce, EstimatorKind::StGumbelSoftmax] {
        for (name, parallel) in modes() {
            let mut exp = experiment(estimator, parallel);
            group.bench_function(BenchmarkId::new(estimator.name(), name), |b| {
                b.iter(|| black_box(exp.step().unwrap()));
            });
        }
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, parallel) in modes() {
        let exp = experiment(EstimatorKind::StGumbelSoftmax, parallel);
        group.bench_function(name, |b| b.iter(|| black_box(exp.evaluate().unwrap())));
    }
    group.finish();
}

fn batch_building(c: &mut Criterion) {
    let exp = experiment(EstimatorKind::Reinforce, false);
    c.bench_function("make_batch_1024", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            black_box(make_batch(&exp.data.train, 1024, exp.cfg.distractors, &mut rng).unwrap())
        });
    });
}

fn gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck_suite");
    group.sample_size(10);
    for (name, exec) in [
        ("sequential", Exec::Sequential),
        ("parallel", Exec::Parallel),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| black_box(run_suite(2, 0, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, evaluation, batch_building, gradcheck);
criterion_main!(benches);
