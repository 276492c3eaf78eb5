//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retrospec_core::corpus::{gen_synthetic, gen_targets, GrammarConfig, SyntheticDataset};
use retrospec_core::model::{ModelConfig, ModelParameters, Transformer};

/// `n` verification problems: per-position distributions plus a draft.
pub fn verify_cases(n: usize, vocab: usize, len: usize, seed: u64) -> Vec<(Vec<Vec<f64>>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let probs = (0..=len)
                .map(|_| {
                    let raw: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>().powi(4)).collect();
                    let z: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / z).collect()
                })
                .collect();
            let draft = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
            (probs, draft)
        })
        .collect()
}

/// Untrained toy-size model; speed does not depend on the weights.
pub fn toy_model(vocab: usize, medusa_heads: usize) -> Transformer {
    let config = ModelConfig {
        medusa_heads,
        ..ModelConfig::toy(vocab)
    };
    Transformer::new(ModelParameters::init(&config, 7)).expect("valid toy config")
}

/// Source sequences of `len` random non-special tokens followed by eos.
pub fn sources(n: usize, vocab: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s: Vec<u32> = (0..len).map(|_| rng.random_range(4..vocab as u32)).collect();
            s.push(retrospec_core::smiles::EOS);
            s
        })
        .collect()
}

/// Small synthetic corpus plus planning targets drawn from its grammar.
pub fn planning_fixture(targets: usize) -> (SyntheticDataset, Vec<String>) {
    let config = GrammarConfig {
        size: 2000,
        blocks: 60,
        ..Default::default()
    };
    let dataset = gen_synthetic(&config).expect("feasible grammar");
    let exclude = dataset.all_pairs().map(|p| p.product.clone()).collect();
    let targets = gen_targets(&dataset.grammar, targets, config.max_depth, 11, &exclude)
        .expect("feasible targets")
        .into_iter()
        .map(|t| t.smiles)
        .collect();
    (dataset, targets)
}
