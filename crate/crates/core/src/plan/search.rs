use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

use super::tree::{extract_solved_routes, MolId, SearchTree};
use super::{Algorithm, Expander, PlanConfig, PlanError, PlanResult, Stock, StopReason};

/// A queued molecule. Lower cost first; equal costs leave in insertion order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierEntry {
    pub cost: f64,
    pub seq: u64,
    pub mol: MolId,
}

impl Eq for FrontierEntry {}

impl Ord for FrontierEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost.total_cmp(&other.cost).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for FrontierEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Frontier {
    heap: BinaryHeap<Reverse<FrontierEntry>>,
    seq: u64,
}

impl Frontier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, cost: f64, mol: MolId) {
        self.heap.push(Reverse(FrontierEntry { cost, seq: self.seq, mol }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<FrontierEntry> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    /// Entries still in the queue, stale ones included.
    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Remove up to `width` of the cheapest expandable molecules. Entries made
/// stale by a cheaper duplicate or an earlier expansion are dropped.
pub fn pop_batch(frontier: &mut Frontier, tree: &SearchTree, width: usize) -> Vec<MolId> {
    let mut batch = Vec::with_capacity(width);
    while batch.len() < width {
        let Some(e) = frontier.pop() else { break };
        let m = &tree.molecules[e.mol];
        if m.expanded || m.in_stock || e.cost > m.cost || batch.contains(&e.mol) {
            continue;
        }
        batch.push(e.mol);
    }
    batch
}

struct Run<'a, E> {
    expander: E,
    stock: &'a Stock,
    config: &'a PlanConfig,
    start: Instant,
    tree: SearchTree,
    iterations: usize,
    model_calls: u64,
    order: Vec<String>,
}

impl<'a, E: Expander> Run<'a, E> {
    fn new(target: &str, expander: E, stock: &'a Stock, config: &'a PlanConfig) -> Result<Self, PlanError> {
        config.validate()?;
        if target.is_empty() {
            return Err(PlanError::EmptyTarget);
        }
        Ok(Self {
            expander,
            stock,
            config,
            start: Instant::now(),
            tree: SearchTree::new(target, stock, config.max_depth),
            iterations: 0,
            model_calls: 0,
            order: Vec::new(),
        })
    }

    /// Checked before every iteration.
    fn limit(&self) -> Option<StopReason> {
        if self.iterations >= self.config.max_iterations {
            return Some(StopReason::IterationCap);
        }
        if self
            .config
            .time_limit
            .is_some_and(|t| self.start.elapsed().as_secs_f64() >= t)
        {
            return Some(StopReason::TimeLimit);
        }
        if self.config.max_model_calls.is_some_and(|b| self.model_calls >= b) {
            return Some(StopReason::CallBudget);
        }
        None
    }

    /// One iteration: expand `batch` with a single expander call.
    fn expand(&mut self, batch: &[MolId]) -> Vec<MolId> {
        let smiles: Vec<&str> = batch.iter().map(|&id| self.tree.molecules[id].smiles.as_str()).collect();
        let expansion = self.expander.expand(&smiles);
        self.iterations += 1;
        self.model_calls += expansion.model_calls;
        let mut queued = Vec::new();
        let mut steps = expansion.steps.into_iter();
        for &id in batch {
            let mut s = steps.next().unwrap_or_default();
            s.truncate(self.config.expansions);
            self.order.push(self.tree.molecules[id].smiles.clone());
            queued.extend(self.tree.expand(id, s, self.stock));
        }
        queued
    }

    fn finish(self, stop: StopReason) -> PlanResult {
        let route = extract_solved_routes(&self.tree, 1).pop();
        PlanResult {
            target: self.tree.molecules[0].smiles.clone(),
            solved: route.is_some(),
            route,
            iterations: self.iterations,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            model_calls: self.model_calls,
            nodes: self.tree.molecules.len(),
            stop,
            expansion_order: self.order,
            tree: self.tree,
        }
    }
}

/// Best-first search keyed on cumulative -log p from the target. Each
/// iteration pops `beam_width` molecules and expands them in one call;
/// the search stops as soon as the target has a solved route.
pub fn retro_star<E: Expander>(
    target: &str,
    expander: E,
    stock: &Stock,
    config: &PlanConfig,
) -> Result<PlanResult, PlanError> {
    let mut run = Run::new(target, expander, stock, config)?;
    if run.tree.solved() {
        return Ok(run.finish(StopReason::Solved));
    }
    let mut frontier = Frontier::new();
    frontier.push(0.0, run.tree.root());
    let stop = loop {
        if let Some(reason) = run.limit() {
            break reason;
        }
        let batch = pop_batch(&mut frontier, &run.tree, config.beam_width);
        if batch.is_empty() {
            break StopReason::Exhausted;
        }
        for id in run.expand(&batch) {
            frontier.push(run.tree.molecules[id].cost, id);
        }
        if run.tree.solved() {
            break StopReason::Solved;
        }
    };
    Ok(run.finish(stop))
}

/// Depth-first search: expand the current molecule, then try its reactions
/// in rank order, recursing into each precursor; back up on dead ends.
pub fn dfs_plan<E: Expander>(
    target: &str,
    expander: E,
    stock: &Stock,
    config: &PlanConfig,
) -> Result<PlanResult, PlanError> {
    let mut run = Run::new(target, expander, stock, config)?;
    if run.tree.solved() {
        return Ok(run.finish(StopReason::Solved));
    }
    let mut failed = HashMap::new();
    let mut path = Vec::new();
    let root = run.tree.root();
    let stop = match dfs(&mut run, root, 0, &mut path, &mut failed) {
        Ok(true) => StopReason::Solved,
        Ok(false) => StopReason::Exhausted,
        Err(reason) => reason,
    };
    Ok(run.finish(stop))
}

fn dfs<E: Expander>(
    run: &mut Run<'_, E>,
    id: MolId,
    depth: usize,
    path: &mut Vec<MolId>,
    failed: &mut HashMap<MolId, usize>,
) -> Result<bool, StopReason> {
    let max = run.config.max_depth;
    let m = &run.tree.molecules[id];
    if m.in_stock || m.height.is_some_and(|h| depth + h <= max) {
        return Ok(true);
    }
    if depth >= max || path.contains(&id) || failed.get(&id).is_some_and(|&d| d <= depth) {
        return Ok(false);
    }
    if !m.expanded {
        if let Some(reason) = run.limit() {
            return Err(reason);
        }
        run.expand(&[id]);
    }
    path.push(id);
    let reactions = run.tree.molecules[id].reactions.clone();
    for rid in reactions {
        let children = run.tree.reactions[rid].children.clone();
        let mut all = true;
        for c in children {
            if !dfs(run, c, depth + 1, path, failed)? {
                all = false;
                break;
            }
        }
        if all {
            path.pop();
            return Ok(true);
        }
    }
    path.pop();
    failed.insert(id, depth);
    Ok(false)
}

/// Run the configured algorithm.
pub fn plan<E: Expander>(target: &str, expander: E, stock: &Stock, config: &PlanConfig) -> Result<PlanResult, PlanError> {
    match config.algorithm {
        Algorithm::RetroStar => retro_star(target, expander, stock, config),
        Algorithm::Dfs => dfs_plan(target, expander, stock, config),
    }
}
