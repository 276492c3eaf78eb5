use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Expander, Expansion, ReactionStep};
use crate::decode::{generate, DecodeConfig, DecodeMetrics, DecodeModel};
use crate::model::encode_source;
use crate::smiles::{validate_syntactic, Vocabulary};

/// Predictions dropped while turning decoder output into reactions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub invalid: u64,
    pub self_loops: u64,
    pub duplicates: u64,
    /// Molecules the decoder could not process (unknown tokens, too long).
    pub decode_failures: u64,
}

impl FilterStats {
    pub fn merge(&mut self, other: &FilterStats) {
        self.invalid += other.invalid;
        self.self_loops += other.self_loops;
        self.duplicates += other.duplicates;
        self.decode_failures += other.decode_failures;
    }
}

/// Turn ranked `(precursor string, log-probability)` predictions into at most
/// `k` reactions. Syntactically invalid strings, sets that contain the
/// product itself, and repeated precursor sets are dropped; among duplicates
/// the most probable one stays. `rank` keeps the prediction's position.
pub fn filter_predictions(product: &str, predictions: &[(String, f64)], k: usize) -> (Vec<ReactionStep>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].1.total_cmp(&predictions[a].1).then(a.cmp(&b)));
    let mut seen = HashSet::new();
    let mut steps = Vec::new();
    for rank in order {
        let (smiles, log_prob) = &predictions[rank];
        let precursors: Vec<String> = smiles.split('.').map(str::to_owned).collect();
        if precursors.iter().any(|p| !validate_syntactic(p).valid) {
            stats.invalid += 1;
            continue;
        }
        if precursors.iter().any(|p| p == product) {
            stats.self_loops += 1;
            continue;
        }
        let mut key = precursors.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            stats.duplicates += 1;
            continue;
        }
        if steps.len() < k {
            steps.push(ReactionStep {
                product: product.to_owned(),
                precursors,
                log_prob: *log_prob,
                rank,
            });
        }
    }
    steps.sort_by_key(|s| s.rank);
    (steps, stats)
}

/// Single-step predictions from a sequence model: one batched decode per
/// expansion, `config.beam_size` outputs per molecule.
pub struct ModelExpander<'a, M: ?Sized> {
    model: &'a M,
    vocab: &'a Vocabulary,
    config: DecodeConfig,
    pub filtered: FilterStats,
    pub metrics: DecodeMetrics,
}

impl<'a, M: DecodeModel + ?Sized> ModelExpander<'a, M> {
    pub fn new(model: &'a M, vocab: &'a Vocabulary, config: DecodeConfig) -> Self {
        Self {
            model,
            vocab,
            config,
            filtered: FilterStats::default(),
            metrics: DecodeMetrics::default(),
        }
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }
}

impl<M: DecodeModel + ?Sized> Expander for ModelExpander<'_, M> {
    fn expand(&mut self, molecules: &[&str]) -> Expansion {
        let mut steps = vec![Vec::new(); molecules.len()];
        let mut slots = Vec::new();
        let mut sources = Vec::new();
        for (i, m) in molecules.iter().enumerate() {
            match encode_source(self.vocab, m) {
                Ok(ids) if ids.len() <= self.model.max_len() => {
                    slots.push(i);
                    sources.push(ids);
                }
                _ => self.filtered.decode_failures += 1,
            }
        }
        if sources.is_empty() {
            return Expansion { steps, model_calls: 0 };
        }
        let (hyps, metrics) = match generate(self.model, &sources, &self.config) {
            Ok(out) => out,
            Err(_) => {
                self.filtered.decode_failures += sources.len() as u64;
                return Expansion { steps, model_calls: 0 };
            }
        };
        self.metrics.merge(&metrics);
        for (slot, hyps) in slots.into_iter().zip(hyps) {
            let mut predictions = Vec::with_capacity(hyps.len());
            for h in &hyps {
                if h.finished {
                    predictions.push((self.vocab.decode(h.body()), h.score));
                } else {
                    self.filtered.invalid += 1;
                }
            }
            let (s, stats) = filter_predictions(molecules[slot], &predictions, self.config.beam_size);
            self.filtered.merge(&stats);
            steps[slot] = s;
        }
        Expansion {
            steps,
            model_calls: metrics.model_calls,
        }
    }
}

/// Expand one molecule and keep at most `k` reactions.
pub fn expand<E: Expander + ?Sized>(expander: &mut E, molecule: &str, k: usize) -> Vec<ReactionStep> {
    let mut steps = expander.expand(&[molecule]).steps.pop().unwrap_or_default();
    steps.truncate(k);
    steps
}
