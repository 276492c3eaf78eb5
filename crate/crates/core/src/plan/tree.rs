use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ReactionStep, Stock};

pub type MolId = usize;

/// A molecule of the AND-OR tree. Each distinct string has one node; the
/// cheapest path that reached it provides `cost` and `parent`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeNode {
    pub smiles: String,
    pub in_stock: bool,
    /// Shallowest depth at which the molecule was reached (root 0).
    pub depth: usize,
    /// Lowest cumulative cost (sum of -log p from the root).
    pub cost: f64,
    /// Reaction that reached the molecule at `cost`.
    pub parent: Option<usize>,
    pub reactions: Vec<usize>,
    pub expanded: bool,
    /// Fewest reactions in a solved route below this molecule.
    pub height: Option<usize>,
    /// Reactions that use this molecule as a precursor.
    pub(crate) used_by: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Open,
    Solved,
    Expanded,
    Dead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNode {
    pub product: MolId,
    pub step: ReactionStep,
    pub children: Vec<MolId>,
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchTree {
    pub molecules: Vec<MoleculeNode>,
    pub reactions: Vec<ReactionNode>,
    index: HashMap<String, MolId>,
    pub max_depth: usize,
}

impl SearchTree {
    pub fn new(target: &str, stock: &Stock, max_depth: usize) -> Self {
        let mut tree = Self {
            max_depth,
            ..Default::default()
        };
        tree.add_molecule(target, stock, 0, 0.0, None);
        tree
    }

    pub fn root(&self) -> MolId {
        0
    }

    pub fn get(&self, smiles: &str) -> Option<MolId> {
        self.index.get(smiles).copied()
    }

    pub fn solved(&self) -> bool {
        self.molecules[0].height.is_some_and(|h| h <= self.max_depth)
    }

    pub fn status(&self, id: MolId) -> NodeStatus {
        let m = &self.molecules[id];
        if m.height.is_some() {
            NodeStatus::Solved
        } else if m.expanded && m.reactions.is_empty() {
            NodeStatus::Dead
        } else if m.expanded {
            NodeStatus::Expanded
        } else if m.depth >= self.max_depth {
            NodeStatus::Dead
        } else {
            NodeStatus::Open
        }
    }

    /// Insert or update a molecule reached at (`depth`, `cost`). Returns the
    /// id and whether the molecule became (newly or more cheaply) expandable,
    /// i.e. should be queued.
    pub(crate) fn add_molecule(
        &mut self,
        smiles: &str,
        stock: &Stock,
        depth: usize,
        cost: f64,
        parent: Option<usize>,
    ) -> (MolId, bool) {
        if let Some(&id) = self.index.get(smiles) {
            let m = &mut self.molecules[id];
            let mut improved = false;
            if cost < m.cost {
                m.cost = cost;
                m.parent = parent;
                improved = true;
            }
            if depth < m.depth {
                m.depth = depth;
                improved = true;
            }
            let queue = improved && !m.expanded && !m.in_stock && m.depth < self.max_depth;
            return (id, queue);
        }
        let id = self.molecules.len();
        let in_stock = stock.contains(smiles);
        self.molecules.push(MoleculeNode {
            smiles: smiles.to_owned(),
            in_stock,
            depth,
            cost,
            parent,
            reactions: Vec::new(),
            expanded: false,
            height: in_stock.then_some(0),
            used_by: Vec::new(),
        });
        self.index.insert(smiles.to_owned(), id);
        (id, !in_stock && depth < self.max_depth)
    }

    /// Attach the predicted reactions of `id`, in rank order. Returns the
    /// precursor molecules that should enter the frontier, in insertion order.
    pub(crate) fn expand(&mut self, id: MolId, steps: Vec<ReactionStep>, stock: &Stock) -> Vec<MolId> {
        self.molecules[id].expanded = true;
        let depth = self.molecules[id].depth + 1;
        let base = self.molecules[id].cost;
        let mut queued = Vec::new();
        for step in steps {
            let rid = self.reactions.len();
            let cost = base + step.cost();
            let mut children = Vec::with_capacity(step.precursors.len());
            for p in &step.precursors {
                let (child, queue) = self.add_molecule(p, stock, depth, cost, Some(rid));
                if queue {
                    queued.push(child);
                }
                if !self.molecules[child].used_by.contains(&rid) {
                    self.molecules[child].used_by.push(rid);
                }
                children.push(child);
            }
            self.reactions.push(ReactionNode {
                product: id,
                step,
                children,
                height: None,
            });
            self.molecules[id].reactions.push(rid);
            self.refresh_reaction(rid);
        }
        queued
    }

    /// Recompute solved heights upward from one reaction.
    fn refresh_reaction(&mut self, rid: usize) {
        let mut work = vec![rid];
        while let Some(rid) = work.pop() {
            let r = &self.reactions[rid];
            let mut h = Some(0usize);
            for &c in &r.children {
                h = match (h, self.molecules[c].height) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
            }
            let Some(h) = h.map(|h| h + 1) else { continue };
            if self.reactions[rid].height.is_some_and(|old| old <= h) {
                continue;
            }
            self.reactions[rid].height = Some(h);
            let product = self.reactions[rid].product;
            let m = &mut self.molecules[product];
            if m.height.is_none_or(|old| h < old) {
                m.height = Some(h);
                work.extend(m.used_by.iter().copied());
            }
        }
    }

    /// Sum of reaction costs on the recorded path from the root to `id`.
    pub fn path_cost(&self, id: MolId) -> f64 {
        let mut total = 0.0;
        let mut cur = id;
        while let Some(rid) = self.molecules[cur].parent {
            total += self.reactions[rid].step.cost();
            cur = self.reactions[rid].product;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteReaction {
    pub log_prob: f64,
    pub rank: usize,
}

/// A solved synthesis route: every leaf is a building block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTree {
    pub molecule: String,
    pub in_stock: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reaction: Option<RouteReaction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<RouteTree>,
}

impl RouteTree {
    pub fn leaves(&self) -> Vec<&str> {
        if self.children.is_empty() {
            return vec![self.molecule.as_str()];
        }
        self.children.iter().flat_map(|c| c.leaves()).collect()
    }

    /// Reactions on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| c.depth() + 1).max().unwrap_or(0)
    }

    pub fn cost(&self) -> f64 {
        self.reaction.as_ref().map_or(0.0, |r| -r.log_prob) + self.children.iter().map(RouteTree::cost).sum::<f64>()
    }

    pub fn reactions(&self) -> usize {
        usize::from(self.reaction.is_some()) + self.children.iter().map(RouteTree::reactions).sum::<usize>()
    }

    fn contains(&self, molecule: &str) -> bool {
        self.molecule == molecule || self.children.iter().any(|c| c.contains(molecule))
    }
}

type Ranked = Vec<(f64, RouteTree)>;

/// Up to `limit` distinct solved routes of the root, cheapest first. Only
/// solved subtrees are visited; routes revisiting a molecule are skipped.
pub fn extract_solved_routes(tree: &SearchTree, limit: usize) -> Vec<RouteTree> {
    if limit == 0 || !tree.solved() {
        return Vec::new();
    }
    let mut memo = HashMap::new();
    routes_of(tree, tree.root(), tree.max_depth, limit, &mut memo)
        .into_iter()
        .map(|(_, r)| r)
        .collect()
}

fn routes_of(
    tree: &SearchTree,
    id: MolId,
    budget: usize,
    limit: usize,
    memo: &mut HashMap<(MolId, usize), Ranked>,
) -> Ranked {
    let m = &tree.molecules[id];
    if m.in_stock {
        return vec![(
            0.0,
            RouteTree {
                molecule: m.smiles.clone(),
                in_stock: true,
                reaction: None,
                children: Vec::new(),
            },
        )];
    }
    if budget == 0 || m.height.is_none_or(|h| h > budget) {
        return Vec::new();
    }
    if let Some(hit) = memo.get(&(id, budget)) {
        return hit.clone();
    }
    let mut out: Ranked = Vec::new();
    for &rid in &m.reactions {
        let r = &tree.reactions[rid];
        if r.height.is_none_or(|h| h > budget) {
            continue;
        }
        let mut combos: Vec<(f64, Vec<RouteTree>)> = vec![(0.0, Vec::new())];
        for &c in &r.children {
            let sub: Ranked = routes_of(tree, c, budget - 1, limit, memo)
                .into_iter()
                .filter(|(_, t)| !t.contains(&m.smiles))
                .collect();
            let mut next = Vec::new();
            for (ca, parts) in &combos {
                for (cs, t) in &sub {
                    let mut parts = parts.clone();
                    parts.push(t.clone());
                    next.push((ca + cs, parts));
                }
            }
            next.sort_by(|a, b| a.0.total_cmp(&b.0));
            next.truncate(limit);
            combos = next;
        }
        for (c, children) in combos {
            out.push((
                c + r.step.cost(),
                RouteTree {
                    molecule: m.smiles.clone(),
                    in_stock: false,
                    reaction: Some(RouteReaction {
                        log_prob: r.step.log_prob,
                        rank: r.step.rank,
                    }),
                    children,
                },
            ));
        }
    }
    // Stable: equal costs keep reaction rank order.
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.truncate(limit);
    memo.insert((id, budget), out.clone());
    out
}
