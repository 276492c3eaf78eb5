//! Multi-step retrosynthesis: best-first (cost-only Retro*) and depth-first
//! search over an AND-OR tree of molecules and reactions.

mod expand;
mod search;
mod tree;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expand::{expand, filter_predictions, FilterStats, ModelExpander};
pub use search::{dfs_plan, plan, pop_batch, retro_star, Frontier, FrontierEntry};
pub use tree::{extract_solved_routes, MolId, MoleculeNode, ReactionNode, RouteReaction, RouteTree, SearchTree};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
    #[error("empty target")]
    EmptyTarget,
    #[error("unknown search algorithm {0:?} (expected retro-star or dfs)")]
    UnknownAlgorithm(String),
}

/// Purchasable building blocks, matched by exact string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stock {
    molecules: HashSet<String>,
}

impl Stock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, smiles: impl Into<String>) -> bool {
        self.molecules.insert(smiles.into())
    }

    pub fn contains(&self, smiles: &str) -> bool {
        self.molecules.contains(smiles)
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    /// Members in sorted order.
    pub fn sorted(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.molecules.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

impl<S: Into<String>> FromIterator<S> for Stock {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            molecules: iter.into_iter().map(Into::into).collect(),
        }
    }
}

pub fn in_stock(molecule: &str, stock: &Stock) -> bool {
    stock.contains(molecule)
}

/// One predicted disconnection of `product`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionStep {
    pub product: String,
    pub precursors: Vec<String>,
    /// Natural-log probability of the precursor string under the model.
    pub log_prob: f64,
    /// Position among the model's outputs for this product, 0 first.
    pub rank: usize,
}

impl ReactionStep {
    pub fn cost(&self) -> f64 {
        -self.log_prob
    }
}

/// Single-step predictions for a batch of molecules.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expansion {
    pub steps: Vec<Vec<ReactionStep>>,
    pub model_calls: u64,
}

/// A single-step model as seen by the planner. One call to `expand` handles
/// the whole batch, so its model calls are shared by all molecules.
pub trait Expander {
    fn expand(&mut self, molecules: &[&str]) -> Expansion;
}

impl<E: Expander + ?Sized> Expander for &mut E {
    fn expand(&mut self, molecules: &[&str]) -> Expansion {
        (**self).expand(molecules)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "retro-star")]
    RetroStar,
    #[serde(rename = "dfs")]
    Dfs,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::RetroStar => "retro-star",
            Algorithm::Dfs => "dfs",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retro-star" | "retrostar" => Ok(Algorithm::RetroStar),
            "dfs" => Ok(Algorithm::Dfs),
            other => Err(PlanError::UnknownAlgorithm(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub algorithm: Algorithm,
    /// Longest route, in reactions.
    pub max_depth: usize,
    pub max_iterations: usize,
    /// Seconds from submission; `None` runs until another limit hits.
    pub time_limit: Option<f64>,
    /// Precursor sets kept per expanded molecule.
    pub expansions: usize,
    /// Frontier entries popped and expanded together.
    pub beam_width: usize,
    /// Optional cap on decoder calls, checked between iterations.
    pub max_model_calls: Option<u64>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::RetroStar,
            max_depth: 5,
            max_iterations: 35_000,
            time_limit: Some(5.0),
            expansions: 10,
            beam_width: 1,
            max_model_calls: None,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.to_owned()));
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if self.expansions == 0 {
            return bad("expansions must be at least 1");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1");
        }
        if self.time_limit.is_some_and(|t| !(t > 0.0)) {
            return bad("time_limit must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Solved,
    IterationCap,
    TimeLimit,
    CallBudget,
    Exhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub target: String,
    pub solved: bool,
    pub route: Option<RouteTree>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub model_calls: u64,
    pub nodes: usize,
    pub stop: StopReason,
    /// Molecules in the order they were expanded.
    pub expansion_order: Vec<String>,
    #[serde(skip)]
    pub tree: SearchTree,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_collapses_duplicates() {
        let stock: Stock = ["CCO", "CCO", "N"].into_iter().collect();
        assert_eq!(stock.len(), 2);
        assert!(in_stock("CCO", &stock));
        assert!(!in_stock("CCN", &stock));
        assert_eq!(stock.sorted(), vec!["CCO", "N"]);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::RetroStar, Algorithm::Dfs] {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("mcts".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_rejects_zero_width() {
        let cfg = PlanConfig {
            beam_width: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(PlanConfig::default().validate().is_ok());
    }
}
