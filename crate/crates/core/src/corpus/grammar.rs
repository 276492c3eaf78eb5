use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, ReactionPair};
use crate::plan::{Expander, Expansion, ReactionStep};
use crate::smiles::{detokenize, tokenize, validate_syntactic};

/// Bracket atoms reserved for linkers; blocks never contain them, so the
/// last linker in a product always marks the last bond formed.
const LINKER_POOL: [&str; 10] = ["[Si]", "[Se]", "[Sn]", "[Ge]", "[Te]", "[As]", "[Sb]", "[Bi]", "[Pb]", "[Ga]"];

/// Products copy at least this share of their tokens from the reactants.
const MIN_COPY: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    /// Chain atoms of building blocks.
    pub alphabet: Vec<String>,
    /// Side groups that may decorate a chain, e.g. `(=O)`.
    pub branches: Vec<String>,
    /// Coupling rules; rule `r` joins two molecules through linker `r`.
    pub rules: usize,
    /// Building block length in tokens, inclusive.
    pub fragment_len: (usize, usize),
    /// Number of building blocks (the stock).
    pub blocks: usize,
    /// Deepest product, in rule applications.
    pub max_depth: usize,
    /// Reaction pairs over all splits.
    pub size: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            alphabet: ["C", "C", "N", "O", "S"].map(String::from).to_vec(),
            branches: ["(C)", "(=O)", "(O)", "(N)", "(F)", "(Cl)"].map(String::from).to_vec(),
            rules: 6,
            fragment_len: (3, 6),
            blocks: 150,
            max_depth: 5,
            size: 20_000,
            valid_fraction: 0.05,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

impl GrammarConfig {
    fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Infeasible(m));
        if self.alphabet.is_empty() {
            return bad("alphabet is empty".into());
        }
        if self.rules == 0 || self.rules > LINKER_POOL.len() {
            return bad(format!("rules must be in 1..={}", LINKER_POOL.len()));
        }
        let (lo, hi) = self.fragment_len;
        if lo == 0 || lo > hi {
            return bad(format!("fragment length range {lo}..={hi} is empty"));
        }
        if !(1..=5).contains(&self.max_depth) {
            return bad("max_depth must be in 1..=5".into());
        }
        if self.blocks < 2 {
            return bad("at least two building blocks are needed".into());
        }
        let fractions = self.valid_fraction + self.test_fraction;
        if self.valid_fraction < 0.0 || self.test_fraction < 0.0 || fractions >= 1.0 {
            return bad("split fractions must be non-negative and sum below 1".into());
        }
        for unit in self.alphabet.iter().chain(&self.branches) {
            let tokens = tokenize(unit).map_err(|e| CorpusError::Infeasible(format!("{unit:?}: {e}")))?;
            if tokens.iter().any(|t| LINKER_POOL.contains(t)) {
                return bad(format!("{unit:?} uses a reserved linker token"));
            }
            if !validate_syntactic(&format!("C{unit}")).valid {
                return bad(format!("{unit:?} is not a valid chain unit"));
            }
        }
        for atom in &self.alphabet {
            if tokenize(atom).map(|t| t.len()).unwrap_or(0) != 1 {
                return bad(format!("alphabet entry {atom:?} must be one token"));
            }
        }
        Ok(())
    }
}

/// Building blocks plus linkers. A depth-d product is
/// `b0 L1 b1 L2 ... Ld bd`; its last disconnection gives
/// `b0 L1 ... b(d-1)` and `bd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub blocks: Vec<String>,
    pub linkers: Vec<String>,
}

impl Grammar {
    pub fn new(config: &GrammarConfig) -> Result<Self, CorpusError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut seen = HashSet::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut attempts = 0;
        while blocks.len() < config.blocks {
            attempts += 1;
            if attempts > config.blocks * 200 {
                return Err(CorpusError::Infeasible(format!(
                    "only {} distinct blocks of length {:?} could be drawn",
                    blocks.len(),
                    config.fragment_len
                )));
            }
            let b = draw_block(config, &mut rng);
            if seen.insert(b.clone()) {
                blocks.push(b);
            }
        }
        blocks.sort();
        Ok(Self {
            blocks,
            linkers: LINKER_POOL[..config.rules].iter().map(|s| s.to_string()).collect(),
        })
    }

    fn is_linker(&self, token: &str) -> bool {
        self.linkers.iter().any(|l| l == token)
    }

    /// A random product of exactly `depth` rule applications, with the pair
    /// for its last step.
    fn draw(&self, depth: usize, rng: &mut ChaCha8Rng) -> ReactionPair {
        let mut left = self.blocks.choose(rng).expect("blocks").clone();
        for _ in 1..depth {
            left.push_str(self.linkers.choose(rng).expect("linkers"));
            left.push_str(self.blocks.choose(rng).expect("blocks"));
        }
        let right = self.blocks.choose(rng).expect("blocks");
        let linker = self.linkers.choose(rng).expect("linkers");
        ReactionPair {
            product: format!("{left}{linker}{right}"),
            reactants: format!("{left}.{right}"),
        }
    }

    /// Every reverse rule application on `product`, last linker first.
    pub fn disconnections(&self, product: &str) -> Vec<(String, String)> {
        let Ok(tokens) = tokenize(product) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for i in (1..tokens.len().saturating_sub(1)).rev() {
            if self.is_linker(tokens[i]) && !self.is_linker(tokens[i - 1]) && !self.is_linker(tokens[i + 1]) {
                out.push((detokenize(&tokens[..i]), detokenize(&tokens[i + 1..])));
            }
        }
        out
    }

    /// Number of rule applications that built `product`.
    pub fn depth_of(&self, product: &str) -> usize {
        tokenize(product)
            .map(|t| t.iter().filter(|x| self.is_linker(x)).count())
            .unwrap_or(0)
    }
}

fn draw_block(config: &GrammarConfig, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(config.fragment_len.0..=config.fragment_len.1);
    let mut out = config.alphabet.choose(rng).expect("alphabet").clone();
    let mut n = 1;
    while n < len {
        let room = len - n;
        let fitting: Vec<&String> = config
            .branches
            .iter()
            .filter(|b| tokenize(b).map(|t| t.len()).unwrap_or(usize::MAX) <= room)
            .collect();
        if !fitting.is_empty() && rng.random_bool(0.3) {
            let b = fitting.choose(rng).expect("non-empty");
            n += tokenize(b).expect("checked").len();
            out.push_str(b);
        } else {
            out.push_str(config.alphabet.choose(rng).expect("alphabet"));
            n += 1;
        }
    }
    out
}

/// Longest common subsequence length.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Share of product tokens found, in order, in the reactants.
pub fn copy_fraction(pair: &ReactionPair) -> f64 {
    let (Ok(p), Ok(r)) = (tokenize(&pair.product), tokenize(&pair.reactants)) else {
        return 0.0;
    };
    if p.is_empty() {
        return 0.0;
    }
    lcs_len(&p, &r) as f64 / p.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: GrammarConfig,
    pub grammar: Grammar,
    pub train: Vec<ReactionPair>,
    pub valid: Vec<ReactionPair>,
    pub test: Vec<ReactionPair>,
}

impl SyntheticDataset {
    /// The building blocks: every route of the grammar ends in them.
    pub fn stock(&self) -> &[String] {
        &self.grammar.blocks
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &ReactionPair> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn manifest(&self, checksums: BTreeMap<String, String>) -> DatasetManifest {
        DatasetManifest {
            config: self.config.clone(),
            seed: self.config.seed,
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            stock: self.grammar.blocks.len(),
            checksums,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: GrammarConfig,
    pub seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub stock: usize,
    /// SHA-256 of each written file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

/// Generate distinct single-step pairs with depths spread evenly over
/// 1..=max_depth, then split them on product strings.
pub fn gen_synthetic(config: &GrammarConfig) -> Result<SyntheticDataset, CorpusError> {
    let grammar = Grammar::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_DA7A);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(config.size);
    let mut attempts = 0usize;
    while pairs.len() < config.size {
        attempts += 1;
        if attempts > config.size.saturating_mul(50).max(1000) {
            return Err(CorpusError::Infeasible(format!(
                "only {} distinct products could be drawn",
                pairs.len()
            )));
        }
        let depth = 1 + attempts % config.max_depth;
        let pair = grammar.draw(depth, &mut rng);
        if copy_fraction(&pair) < MIN_COPY {
            continue;
        }
        if seen.insert(pair.product.clone()) {
            pairs.push(pair);
        }
    }
    pairs.shuffle(&mut rng);
    let n_test = (config.size as f64 * config.test_fraction).round() as usize;
    let n_valid = (config.size as f64 * config.valid_fraction).round() as usize;
    let train = pairs.split_off(n_test + n_valid);
    let valid = pairs.split_off(n_test);
    Ok(SyntheticDataset {
        config: config.clone(),
        grammar,
        train,
        valid,
        test: pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTarget {
    pub smiles: String,
    /// Rule applications in the known route.
    pub depth: usize,
}

/// `n` distinct planning targets, depths cycling through 1..=max_depth,
/// avoiding every string in `exclude`.
pub fn gen_targets(
    grammar: &Grammar,
    n: usize,
    max_depth: usize,
    seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<SyntheticTarget>, CorpusError> {
    if max_depth == 0 {
        return Err(CorpusError::Infeasible("max_depth must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > n.saturating_mul(100).max(1000) {
            return Err(CorpusError::Infeasible(format!("only {} distinct targets could be drawn", out.len())));
        }
        let depth = 1 + out.len() % max_depth;
        let pair = grammar.draw(depth, &mut rng);
        if !exclude.contains(&pair.product) && seen.insert(pair.product.clone()) {
            out.push(SyntheticTarget {
                smiles: pair.product,
                depth,
            });
        }
    }
    Ok(out)
}

/// Applies the grammar's rules in reverse; no model involved. The true last
/// disconnection comes first with probability 0.9.
#[derive(Debug, Clone)]
pub struct OracleExpander {
    grammar: Grammar,
    pub calls: u64,
}

impl OracleExpander {
    pub fn new(grammar: Grammar) -> Self {
        Self { grammar, calls: 0 }
    }
}

impl Expander for OracleExpander {
    fn expand(&mut self, molecules: &[&str]) -> Expansion {
        self.calls += 1;
        let steps = molecules
            .iter()
            .map(|m| {
                self.grammar
                    .disconnections(m)
                    .into_iter()
                    .enumerate()
                    .map(|(rank, (left, right))| ReactionStep {
                        product: m.to_string(),
                        precursors: vec![left, right],
                        log_prob: if rank == 0 { 0.9f64.ln() } else { -1.0 - rank as f64 },
                        rank,
                    })
                    .collect()
            })
            .collect();
        Expansion { steps, model_calls: 1 }
    }
}
