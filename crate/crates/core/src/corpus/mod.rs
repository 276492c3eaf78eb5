//! Reaction data: a synthetic retro-grammar for desk-scale experiments and
//! loaders for external reaction and stock files.

mod grammar;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smiles::{tokenize, TokenizeError};

pub use grammar::{
    copy_fraction, gen_synthetic, gen_targets, lcs_len, DatasetManifest, Grammar, GrammarConfig, OracleExpander,
    SyntheticDataset, SyntheticTarget,
};
pub use io::{
    load_lines, load_reactions, load_stock, write_dataset, write_lines, write_reactions, ReactionFormat,
    ReactionsReport, StockReport,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("infeasible grammar config: {0}")]
    Infeasible(String),
    #[error("{path}: no usable reactions ({skipped} lines skipped)")]
    EmptyDataset { path: String, skipped: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One single-step example: a product and its dot-joined precursors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReactionPair {
    pub product: String,
    pub reactants: String,
}

impl ReactionPair {
    pub fn new(product: impl Into<String>, reactants: impl Into<String>) -> Self {
        Self {
            product: product.into(),
            reactants: reactants.into(),
        }
    }

    /// Both sides tokenize and no precursor fragment is empty.
    pub fn check(&self) -> Result<(), TokenizeError> {
        tokenize(&self.product)?;
        tokenize(&self.reactants)?;
        Ok(())
    }

    pub fn precursors(&self) -> Vec<&str> {
        self.reactants.split('.').collect()
    }
}
