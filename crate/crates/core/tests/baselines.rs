use mdmoe::data::synthesize;
use mdmoe::trainer::{evaluate, train};
use mdmoe::{Mode, SynthSpec, TrainConfig, TrainInputs};

fn accuracy(sources: &[mdmoe::DomainDataset], target: &mdmoe::DomainDataset, cfg: &TrainConfig) -> f64 {
    let report = train(&TrainInputs::new(sources), cfg).unwrap();
    evaluate(&report.model, target).unwrap().accuracy.unwrap()
}

#[test]
fn pooling_identical_sources_beats_single_sources_on_average() {
    let (mut pooled, mut single) = (0.0, 0.0);
    let seeds = 10;
    for seed in 0..seeds {
        let data = synthesize(&SynthSpec {
            k: 3,
            dim: 10,
            per_domain_n: 30,
            target_n: 400,
            domain_shift: 0.0,
            noise_std: 1.5,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            mode: Mode::UniMs,
            hidden: 16,
            batch_size: 8,
            learning_rate: Some(1e-2),
            seed,
            ..TrainConfig::default()
        };
        pooled += accuracy(&data.sources, &data.target, &cfg);
        let each: f64 = (0..3)
            .map(|i| accuracy(std::slice::from_ref(&data.sources[i]), &data.target, &cfg))
            .sum();
        single += each / 3.0;
    }
    let (pooled, single) = (pooled / seeds as f64, single / seeds as f64);
    assert!(pooled >= single, "uni-MS {pooled:.4} vs single-source {single:.4}");
}
