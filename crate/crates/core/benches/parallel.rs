//! Sequential against parallel execution for the data-parallel hot paths:
//! batch construction, one loss-and-gradient pass, and test-set scoring.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use medcl_core::evalkit::{evaluate, EvalOptions};
use medcl_core::par::Exec;
use medcl_core::phantom::{generate_split, PhantomSample, PhantomSpec};
use medcl_core::trainer::{loss_and_grad, next_batch, TrainConfig, TrainState};

fn samples(split: usize, n: usize) -> Vec<PhantomSample> {
    generate_split(&PhantomSpec::default(), 1, split, n)
        .unwrap()
        .into_iter()
        .map(|(_, s)| s)
        .collect()
}

fn config(exec: Exec) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = Some(32);
    cfg.trainer.batch_size = 8;
    cfg.trainer.exec = exec;
    cfg
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_training_step(c: &mut Criterion) {
    let train = samples(0, 16);
    let size = train[0].image.height();
    let state = TrainState::init(&config(Exec::Sequential), 3, size).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = config(exec);
        group.bench_function(BenchmarkId::new("next_batch", name), |b| {
            b.iter(|| next_batch(&cfg, &state, &train).unwrap())
        });
        let batch = next_batch(&cfg, &state, &train).unwrap();
        group.bench_function(BenchmarkId::new("loss_and_grad", name), |b| {
            b.iter(|| loss_and_grad(&state.params, &state.prototypes, &state.schedule, &batch, &cfg, None).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let test = samples(2, 20);
    let ids: Vec<String> = (0..test.len()).map(|i| format!("{i}")).collect();
    let size = test[0].image.height();
    let params = TrainState::init(&config(Exec::Sequential), 3, size).unwrap().params;
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = EvalOptions {
            hd_percentile: None,
            exec,
        };
        group.bench_function(name, |b| b.iter(|| evaluate(&params, &test, &ids, 3, opts).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_training_step, bench_evaluation);
criterion_main!(benches);
