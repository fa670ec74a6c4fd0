use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mtt_core::data::{synth_samples, SynthConfig};
use mtt_core::engine::{evaluate, train_step, OptimizerState, Prepared, TrainConfig};
use mtt_core::exec::Execution;
use mtt_core::model::MtTransUNet;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn train_batch(c: &mut Criterion) {
    let config = TrainConfig::desk();
    let samples = synth_samples(&SynthConfig { count: 32, ..Default::default() }, Execution::Sequential).unwrap();
    let prepared: Vec<Prepared> = samples.iter().map(|s| Prepared::from_sample(s).unwrap()).collect();
    let labeled: Vec<Prepared> = prepared.iter().filter(|p| p.mask.is_some()).take(4).cloned().collect();
    let unlabeled: Vec<Prepared> = prepared.iter().filter(|p| p.mask.is_none()).take(4).cloned().collect();
    let model = MtTransUNet::new(config.model.clone(), 0).unwrap();
    let optimizer = OptimizerState::new(model.params(), config.adam.clone());

    let mut group = c.benchmark_group("train_step_4+4");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |b| {
            b.iter_batched(
                || (model.clone(), optimizer.clone()),
                |(mut m, mut opt)| {
                    train_step(&mut m, &mut opt, &labeled, &unlabeled, &config.loss, 100.0, config.lr, exec).unwrap()
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn evaluate_set(c: &mut Criterion) {
    let samples = synth_samples(&SynthConfig { count: 16, ..Default::default() }, Execution::Sequential).unwrap();
    let model = MtTransUNet::new(TrainConfig::desk().model, 0).unwrap();
    let mut group = c.benchmark_group("evaluate_16");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |b| b.iter(|| evaluate(&model, &samples, false, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, train_batch, evaluate_set);
criterion_main!(benches);
