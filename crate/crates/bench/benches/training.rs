use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use mdmoe::trainer::{initial_model, TrainSession};
use mdmoe::{TrainConfig, TrainInputs};
use mdmoe_bench::domains;

fn objective_step(c: &mut Criterion) {
    let data = domains(256, 20);
    let mut group = c.benchmark_group("objective_step");
    for adversarial in [false, true] {
        let cfg = TrainConfig {
            adversarial,
            ..TrainConfig::default()
        };
        let inputs = TrainInputs::new(&data.sources).with_target(&data.target);
        let model = initial_model(&inputs, &cfg).unwrap();
        let name = if adversarial { "moe+adv" } else { "moe" };
        group.bench_function(name, |b| {
            b.iter_batched_ref(
                || {
                    let target = adversarial.then(|| data.target.unlabeled());
                    TrainSession::new(model.clone(), data.sources.clone(), target, &cfg).unwrap()
                },
                |session| session.step(None).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, objective_step);
criterion_main!(benches);
