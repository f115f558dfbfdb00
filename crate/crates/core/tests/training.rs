mod common;

use std::time::Instant;

use cpoforge::model::ModelParams;
use cpoforge::objectives::{CpoConfig, Example, Objective};
use cpoforge::prefgen::synthesize;
use cpoforge::trainer::{TrainConfig, Trainer};

fn smoke(objective: Objective) -> Vec<f64> {
    let corpus = common::toy_corpus();
    let params = ModelParams::init(common::small_config(), 42).unwrap();
    let data: Vec<Example> = match objective {
        Objective::Sft => corpus.pairs().iter().map(|p| Example::pair(&p.source, &p.chosen)).collect(),
        Objective::Cpo => synthesize(&params, &corpus, 24, "init", 42)
            .unwrap()
            .triplets
            .iter()
            .map(Example::triplet)
            .collect(),
    };
    let config = TrainConfig {
        batch_size: 4,
        grad_accum: 1,
        lr_peak: 3e-3,
        warmup_steps: 20,
        epochs: 13,
        checkpoint_every: 1000,
        objective,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(params, config, CpoConfig::default()).unwrap();
    t.run(&data, Some(200)).unwrap();
    t.state().history.iter().map(|r| r.total).collect()
}

#[test]
fn loss_decreases_over_smoke_run() {
    for objective in [Objective::Sft, Objective::Cpo] {
        let start = Instant::now();
        let h = smoke(objective);
        assert_eq!(h.len(), 200);
        let first: f64 = h[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = h[180..].iter().sum::<f64>() / 20.0;
        eprintln!("{objective}: first {first:.3} last {last:.3} ({:.1?})", start.elapsed());
        assert!(last < first, "{objective}: {first} -> {last}");
    }
}
