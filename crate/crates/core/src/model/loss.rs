use ndarray::{s, Array2, Array3, ArrayView2};
use serde::Serialize;

use super::infer::LogitsBlock;
use super::ops::softmax_rows_inplace;
use crate::smiles::{BOS, EOS};

/// A teacher-forcing batch: source ids and gold output ids (no bos/eos).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub sources: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

/// Per-head gold tokens, (batch, position, head). `None` is masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedTargets {
    pub data: Array3<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedusaLoss {
    pub total: f64,
    /// Unweighted mean cross-entropy per head, main head first.
    pub per_head: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// `[bos] + target` for every row.
    pub fn decoder_inputs(&self) -> Vec<Vec<u32>> {
        self.targets
            .iter()
            .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect()
    }

    /// Head `k` at decoder position `i` is trained on gold token `i + k + 1`
    /// of `[bos] + target + [eos]`; anything past eos is masked.
    pub fn shifted_targets(&self, heads: usize) -> ShiftedTargets {
        let len = self.targets.iter().map(|t| t.len() + 1).max().unwrap_or(0);
        let mut data = Array3::from_elem((self.len(), len, heads), None);
        for (b, t) in self.targets.iter().enumerate() {
            let gold: Vec<u32> = t.iter().copied().chain(std::iter::once(EOS)).collect();
            for i in 0..gold.len() {
                for k in 0..heads {
                    data[[b, i, k]] = gold.get(i + k).copied();
                }
            }
        }
        ShiftedTargets { data }
    }
}

/// Weight of head `k` (0 = main) in the combined loss: heads are numbered
/// from 1 and each contributes `1 / number`.
pub fn head_weight(k: usize) -> f64 {
    1.0 / (k + 1) as f64
}

/// Mean cross-entropy over the rows that carry a target, and the gradient
/// of `weight * mean` with respect to the logits.
pub(crate) fn head_cross_entropy(
    logits: ArrayView2<f64>,
    targets: &[Option<u32>],
    weight: f64,
) -> (f64, Array2<f64>) {
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut probs = logits.to_owned();
    softmax_rows_inplace(&mut probs);
    if count == 0 {
        probs.fill(0.0);
        return (0.0, probs);
    }
    let mut loss = 0.0;
    let scale = weight / count as f64;
    for (mut row, target) in probs.rows_mut().into_iter().zip(targets) {
        match target {
            Some(t) => {
                let t = *t as usize;
                loss -= row[t].max(f64::MIN_POSITIVE).ln();
                row[t] -= 1.0;
                row *= scale;
            }
            None => row.fill(0.0),
        }
    }
    (loss / count as f64, probs)
}

/// Combined Medusa loss over a logits block: sum over heads of each head's
/// mean cross-entropy divided by its 1-based number.
pub fn medusa_loss(logits: &LogitsBlock, targets: &ShiftedTargets) -> MedusaLoss {
    let (batch, len, heads, vocab) = logits.shape();
    let mut per_head = Vec::with_capacity(heads);
    for k in 0..heads {
        let mut rows = Vec::new();
        let mut gold = Vec::new();
        for b in 0..batch {
            for p in 0..len.min(logits.lengths[b]) {
                rows.push(logits.data.slice(s![b, p, k, ..]).to_owned());
                gold.push(targets.data.get([b, p, k]).copied().flatten());
            }
        }
        let mut mat = Array2::zeros((rows.len(), vocab));
        for (i, r) in rows.iter().enumerate() {
            mat.row_mut(i).assign(r);
        }
        per_head.push(head_cross_entropy(mat.view(), &gold, 1.0).0);
    }
    let total = per_head
        .iter()
        .enumerate()
        .map(|(k, l)| l * head_weight(k))
        .sum();
    MedusaLoss { total, per_head }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    fn block(data: Array4<f64>) -> LogitsBlock {
        let lengths = vec![data.dim().1; data.dim().0];
        LogitsBlock { data, lengths }
    }

    #[test]
    fn shifted_targets_mask_past_eos() {
        let batch = TrainBatch {
            sources: vec![vec![4]],
            targets: vec![vec![5, 6]],
        };
        assert_eq!(batch.decoder_inputs(), vec![vec![BOS, 5, 6]]);
        let t = batch.shifted_targets(3);
        // gold = [5, 6, eos]
        assert_eq!(t.data[[0, 0, 0]], Some(5));
        assert_eq!(t.data[[0, 0, 1]], Some(6));
        assert_eq!(t.data[[0, 0, 2]], Some(EOS));
        assert_eq!(t.data[[0, 1, 2]], None);
        assert_eq!(t.data[[0, 2, 0]], Some(EOS));
        assert_eq!(t.data[[0, 2, 1]], None);
    }

    #[test]
    fn hand_computed_two_head_loss() {
        // V = 3, one row, two positions, two heads. Logits are log-probabilities
        // so softmax recovers them exactly.
        let p = |a: f64, b: f64, c: f64| [a.ln(), b.ln(), c.ln()];
        let mut data = Array4::zeros((1, 2, 2, 3));
        let rows = [
            (0, 0, p(0.5, 0.25, 0.25)),
            (0, 1, p(0.2, 0.2, 0.6)),
            (1, 0, p(0.1, 0.8, 0.1)),
            (1, 1, p(0.3, 0.3, 0.4)),
        ];
        for (pos, head, r) in rows {
            for v in 0..3 {
                data[[0, pos, head, v]] = r[v];
            }
        }
        let targets = ShiftedTargets {
            data: Array3::from_shape_vec((1, 2, 2), vec![Some(0), Some(2), Some(1), None]).unwrap(),
        };
        let loss = medusa_loss(&block(data), &targets);
        // main head: mean(-ln 0.5, -ln 0.8); second head: -ln 0.6, weighted by 1/2
        let main = (-(0.5f64.ln()) - 0.8f64.ln()) / 2.0;
        let second = -(0.6f64.ln());
        assert!((loss.per_head[0] - main).abs() < 1e-12);
        assert!((loss.per_head[1] - second).abs() < 1e-12);
        assert!((loss.total - (main + second / 2.0)).abs() < 1e-6);
    }

    #[test]
    fn single_head_is_plain_cross_entropy() {
        let data = Array4::from_shape_vec((1, 1, 1, 2), vec![0.0, 0.0]).unwrap();
        let targets = ShiftedTargets {
            data: Array3::from_elem((1, 1, 1), Some(1)),
        };
        let loss = medusa_loss(&block(data), &targets);
        assert!((loss.total - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_no_loss() {
        let mut data = Array4::from_elem((1, 2, 3, 4), -1e3);
        let gold = array![[1usize, 2, 3], [2, 3, 0]];
        for p in 0..2 {
            for k in 0..3 {
                data[[0, p, k, gold[[p, k]]]] = 1e3;
            }
        }
        let targets = ShiftedTargets {
            data: Array3::from_shape_fn((1, 2, 3), |(_, p, k)| Some(gold[[p, k]] as u32)),
        };
        assert!(medusa_loss(&block(data), &targets).total < 1e-12);
    }
}
