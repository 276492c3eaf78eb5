//! Beam search, optimized beam search, and speculative beam search with
//! heuristic (query-fragment) or Medusa-head drafts.

mod beam;
mod model;
mod sbs;
mod verify;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use beam::{beam_search, beam_search_batch};
pub use model::{DecodeModel, EchoHeads, FnModel, Step};
pub use sbs::{sbs_cycle, sbs_generate, sbs_generate_batch, CycleReport, SbsSession};
pub use verify::{extract_query_drafts, medusa_draft, verify_draft, Draft, DraftSource, VerificationResult};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("unknown strategy {0:?} (expected bs, bs-opt, hsbs, or msbs)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Beam search that keeps feeding finished rows with pad.
    #[serde(rename = "bs")]
    Bs,
    /// Beam search that drops finished rows from the decoder batch.
    #[serde(rename = "bs-opt")]
    BsOpt,
    /// Speculative beam search with query-fragment drafts.
    #[serde(rename = "hsbs")]
    Hsbs,
    /// Speculative beam search with Medusa-head drafts.
    #[serde(rename = "msbs")]
    Msbs,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Bs, Strategy::BsOpt, Strategy::Hsbs, Strategy::Msbs];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Bs => "bs",
            Strategy::BsOpt => "bs-opt",
            Strategy::Hsbs => "hsbs",
            Strategy::Msbs => "msbs",
        }
    }

    pub fn is_speculative(self) -> bool {
        matches!(self, Strategy::Hsbs | Strategy::Msbs)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| DecodeError::UnknownStrategy(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Longest output in tokens, eos included. Also capped by the model.
    pub max_len: usize,
    /// Top-p verification threshold.
    pub nucleus: f64,
    pub draft_len: usize,
    /// Query-fragment drafts per beam (HSBS only).
    pub n_drafts: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Msbs,
            beam_size: 10,
            max_len: 200,
            nucleus: 0.9975,
            draft_len: 20,
            n_drafts: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: &str| Err(DecodeError::InvalidConfig(m.to_owned()));
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.nucleus) {
            return bad("nucleus must lie in [0, 1]");
        }
        if self.draft_len == 0 {
            return bad("draft_len must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if self.strategy == Strategy::Hsbs && self.n_drafts == 0 {
            return bad("n_drafts must be at least 1");
        }
        Ok(())
    }

    /// Output length cap after accounting for the bos slot of the model.
    pub(crate) fn cap<M: DecodeModel + ?Sized>(&self, model: &M) -> usize {
        self.max_len.min(model.max_len())
    }
}

/// A committed output prefix; tokens exclude bos and include eos once finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of natural-log token probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub(crate) fn root() -> Self {
        Self {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        }
    }

    /// Output tokens without the trailing eos.
    pub fn body(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&crate::smiles::EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    /// Decoder forward passes. Encoding the source is not counted.
    pub model_calls: u64,
    /// Sequence rows summed over all calls.
    pub rows: u64,
    pub drafted_tokens: u64,
    pub accepted_tokens: u64,
    pub cycles: u64,
    pub wall_time_s: f64,
}

impl DecodeMetrics {
    pub(crate) fn record_call(&mut self, rows: usize) {
        self.model_calls += 1;
        self.rows += rows as u64;
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.drafted_tokens > 0).then(|| self.accepted_tokens as f64 / self.drafted_tokens as f64)
    }

    pub fn mean_batch_size(&self) -> f64 {
        if self.model_calls == 0 {
            0.0
        } else {
            self.rows as f64 / self.model_calls as f64
        }
    }

    pub fn merge(&mut self, other: &DecodeMetrics) {
        self.model_calls += other.model_calls;
        self.rows += other.rows;
        self.drafted_tokens += other.drafted_tokens;
        self.accepted_tokens += other.accepted_tokens;
        self.cycles += other.cycles;
        self.wall_time_s += other.wall_time_s;
    }
}

/// Decode a batch of sources in lockstep with the configured strategy.
/// Sources are id sequences as fed to the encoder (eos included).
pub fn generate<M: DecodeModel + ?Sized>(
    model: &M,
    sources: &[Vec<u32>],
    config: &DecodeConfig,
) -> Result<(Vec<Vec<Hypothesis>>, DecodeMetrics), DecodeError> {
    config.validate()?;
    let start = Instant::now();
    let (hyps, mut metrics) = match config.strategy {
        Strategy::Bs | Strategy::BsOpt => beam_search_batch(model, sources, config)?,
        Strategy::Hsbs | Strategy::Msbs => sbs_generate_batch(model, sources, config)?,
    };
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok((hyps, metrics))
}

/// Log-probabilities and token order (most probable first, ties by id) of one logits row.
pub(crate) struct Dist {
    pub logp: Vec<f64>,
    pub order: Vec<u32>,
}

impl Dist {
    pub fn from_logits(logits: &[f64]) -> Self {
        let logp = crate::model::log_softmax(logits);
        let mut order: Vec<u32> = (0..logp.len() as u32).collect();
        order.sort_by(|&a, &b| logp[b as usize].total_cmp(&logp[a as usize]).then(a.cmp(&b)));
        Self { logp, order }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|v| v.exp()).collect()
    }

    pub fn top(&self, k: usize) -> &[u32] {
        &self.order[..k.min(self.order.len())]
    }
}

pub(crate) fn row_slice(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    row.iter().copied().collect()
}
