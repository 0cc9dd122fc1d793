use std::path::Path;

use layertie::data::Corpus;
use layertie::model::ModelConfig;
use layertie::trainer::{train, Mode, TrainerConfig, TrajectoryRecord};
use layertie::tying::{canonicalize, count_independent};

fn corpus() -> Corpus {
    Corpus::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt"), 0.1).unwrap()
}

fn tiny(n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        context_length: 8,
        seed,
        ..ModelConfig::default()
    }
}

fn short(steps: usize, seed: u64) -> TrainerConfig {
    TrainerConfig {
        steps,
        batch_size: 2,
        controller_period: 5,
        seed,
        eval_every: Some(steps),
        max_val_batches: Some(1),
        ..TrainerConfig::default()
    }
}

/// Parameter count written out from the block and embedding shapes.
fn expected_trainable(m: &ModelConfig, groups: usize) -> usize {
    let (d, f, v, c) = (m.d_model, m.d_ffn, m.vocab_size, m.context_length);
    let block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
    let globals = v * d + c * d + 2 * d + d * v + v;
    groups * block + globals
}

#[test]
fn fifty_short_runs_stay_finite() {
    let corpus = corpus();
    for seed in 0..50 {
        let model = tiny(4, seed);
        let out = train(&short(20, seed), &model, &corpus, None, &mut Vec::new())
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(out.summary.best_val_ppl.is_finite(), "seed {seed}");
    }
}

#[test]
fn records_are_self_consistent() {
    let corpus = corpus();
    let model = tiny(6, 3);
    let cfg = short(120, 3);
    let mut log: Vec<TrajectoryRecord> = Vec::new();
    let out = train(&cfg, &model, &corpus, None, &mut log).unwrap();
    assert_eq!(log.len(), 120 / 5);
    for (n, r) in log.iter().enumerate() {
        assert_eq!(r.step, (n + 1) * cfg.controller_period);
        assert_eq!(canonicalize(&r.action), r.state);
        assert_eq!(r.independent_layers, count_independent(&r.state));
        assert_eq!(r.trainable_params, expected_trainable(&model, r.independent_layers));
        assert!(r.reward.is_finite());
        assert!(r.epsilon.is_some() && r.bellman_target.is_some());
    }
    assert_eq!(out.summary.final_state, log.last().unwrap().state);
    assert_eq!(out.summary.controller_invocations, log.len());
}

#[test]
fn conventional_counts_every_layer() {
    let corpus = corpus();
    let model = tiny(3, 1);
    let cfg = TrainerConfig {
        mode: Mode::Conventional,
        ..short(10, 1)
    };
    let out = train(&cfg, &model, &corpus, None, &mut Vec::new()).unwrap();
    assert_eq!(out.summary.mean_independent_layers, 3.0);
    assert_eq!(out.summary.final_trainable_params, expected_trainable(&model, 3));
}
