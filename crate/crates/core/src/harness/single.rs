use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::ReactionPair;
use crate::decode::{generate, DecodeConfig, DecodeMetrics, DecodeModel, Hypothesis, Strategy};
use crate::model::encode_source;
use crate::smiles::{validate_syntactic, Vocabulary, EOS};

/// Query-fragment draft settings by batch size: (drafts, length).
pub fn hsbs_drafts(batch_size: usize) -> (usize, usize) {
    match batch_size {
        1 => (10, 10),
        4 => (3, 10),
        _ => (1, 20),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleStepOptions {
    pub strategies: Vec<Strategy>,
    pub batch_sizes: Vec<usize>,
    /// Repetitions of every cell; wall time is reported as mean and std.
    pub runs: usize,
    /// Beam size, length cap, and nucleus; drafts are set per cell.
    pub decode: DecodeConfig,
}

impl Default for SingleStepOptions {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            batch_sizes: vec![1, 4, 8, 16, 32],
            runs: 5,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub n_drafts: usize,
    pub draft_len: usize,
    pub wall_time_mean_s: f64,
    /// Omitted for a single run.
    pub wall_time_std_s: Option<f64>,
    pub model_calls: u64,
    pub mean_batch_size: f64,
    pub acceptance_rate: Option<f64>,
    /// Entry `n - 1`: share of reactions whose reference is among the top `n`.
    pub top_n_accuracy: Vec<f64>,
    /// Entry `n - 1`: share of rank-`n` predictions failing the syntax check.
    pub invalid_rate: Vec<f64>,
    /// Counts of the first run, summed over batches.
    pub metrics: DecodeMetrics,
    /// Model calls and rows agreed across all runs.
    pub deterministic: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SingleStepReport {
    pub reactions: usize,
    pub beam_size: usize,
    pub runs: usize,
    pub cells: Vec<CellReport>,
}

impl SingleStepReport {
    pub fn cell(&self, strategy: Strategy, batch_size: usize) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.batch_size == batch_size)
    }
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Decode every reaction of `dataset` under each (strategy, batch size) cell.
/// Sources are tokenized once up front, outside the timed region.
pub fn bench_single_step<M: DecodeModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    dataset: &[ReactionPair],
    options: &SingleStepOptions,
) -> Result<SingleStepReport, HarnessError> {
    let k = options.decode.beam_size;
    let mut report = SingleStepReport {
        reactions: dataset.len(),
        beam_size: k,
        runs: options.runs,
        cells: Vec::new(),
    };
    if dataset.is_empty() {
        return Ok(report);
    }
    let sources = dataset
        .iter()
        .map(|p| encode_source(vocab, &p.product))
        .collect::<Result<Vec<_>, _>>()?;
    for &strategy in &options.strategies {
        for &b in &options.batch_sizes {
            let mut config = DecodeConfig {
                strategy,
                ..options.decode.clone()
            };
            match strategy {
                Strategy::Hsbs => (config.n_drafts, config.draft_len) = hsbs_drafts(b),
                Strategy::Msbs => (config.n_drafts, config.draft_len) = (1, model.extra_heads().max(1)),
                _ => {}
            }
            report.cells.push(run_cell(model, vocab, dataset, &sources, &config, b, options.runs.max(1))?);
        }
    }
    Ok(report)
}

fn run_cell<M: DecodeModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    dataset: &[ReactionPair],
    sources: &[Vec<u32>],
    config: &DecodeConfig,
    batch_size: usize,
    runs: usize,
) -> Result<CellReport, HarnessError> {
    let mut times = Vec::with_capacity(runs);
    let mut first: Option<(DecodeMetrics, Vec<Vec<Hypothesis>>)> = None;
    let mut deterministic = true;
    for _ in 0..runs {
        let mut metrics = DecodeMetrics::default();
        let mut outputs = Vec::with_capacity(sources.len());
        let start = Instant::now();
        for chunk in sources.chunks(batch_size.max(1)) {
            let (hyps, m) = generate(model, chunk, config)?;
            metrics.merge(&m);
            outputs.extend(hyps);
        }
        times.push(start.elapsed().as_secs_f64());
        match &first {
            None => first = Some((metrics, outputs)),
            Some((m0, _)) => deterministic &= m0.model_calls == metrics.model_calls && m0.rows == metrics.rows,
        }
    }
    let (metrics, outputs) = first.expect("at least one run");
    let (mean, std) = mean_std(&times);
    let k = config.beam_size;
    let mut hits = vec![0usize; k];
    let mut invalid = vec![0usize; k];
    let mut present = vec![0usize; k];
    for (pair, hyps) in dataset.iter().zip(&outputs) {
        let strings: Vec<String> = hyps.iter().map(|h| vocab.decode(h.body())).collect();
        if let Some(pos) = strings.iter().position(|s| *s == pair.reactants) {
            for h in hits.iter_mut().skip(pos) {
                *h += 1;
            }
        }
        for (rank, (s, h)) in strings.iter().zip(hyps).enumerate().take(k) {
            present[rank] += 1;
            let finished = h.tokens.last() == Some(&EOS);
            if !finished || !validate_syntactic(s).valid {
                invalid[rank] += 1;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(CellReport {
        strategy: config.strategy,
        batch_size,
        n_drafts: if config.strategy == Strategy::Hsbs { config.n_drafts } else { 1 },
        draft_len: if config.strategy.is_speculative() { config.draft_len } else { 0 },
        wall_time_mean_s: mean,
        wall_time_std_s: std,
        model_calls: metrics.model_calls,
        mean_batch_size: metrics.mean_batch_size(),
        acceptance_rate: metrics.acceptance_rate(),
        top_n_accuracy: hits.iter().map(|&h| h as f64 / n).collect(),
        invalid_rate: invalid
            .iter()
            .zip(&present)
            .map(|(&i, &p)| if p == 0 { 0.0 } else { i as f64 / p as f64 })
            .collect(),
        metrics,
        deterministic,
    })
}
