use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::model::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DraftSource {
    QueryFragment,
    MedusaHeads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draft {
    pub tokens: Vec<u32>,
    pub source: DraftSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accepted: usize,
    /// Main-head choice right after the accepted prefix, when a distribution
    /// for that position was supplied.
    pub bonus: Option<u32>,
    pub flags: Vec<bool>,
}

/// Top-p check of one draft token against a probability row: the mass of
/// strictly more probable tokens plus the token's own must stay below `p`,
/// unless the token is (jointly) the most probable one.
fn accepts(probs: &[f64], token: u32, p: f64) -> bool {
    let own = probs[token as usize];
    let mut sorted: Vec<f64> = probs.iter().copied().filter(|&q| q > own).collect();
    if sorted.is_empty() {
        return true;
    }
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mass = sorted.iter().sum::<f64>() + own;
    mass < p
}

/// Verify `draft` against main-head distributions. `probs[i]` is the
/// distribution for the position of `draft[i]`; an optional extra row gives
/// the bonus after a fully accepted draft.
pub fn verify_draft<P: AsRef<[f64]>>(probs: &[P], draft: &[u32], p: f64) -> VerificationResult {
    let mut flags = vec![false; draft.len()];
    let mut accepted = 0;
    for (i, &token) in draft.iter().enumerate() {
        match probs.get(i) {
            Some(row) if accepts(row.as_ref(), token, p) => {
                flags[i] = true;
                accepted += 1;
            }
            _ => break,
        }
    }
    let bonus = probs
        .get(accepted)
        .map(|row| argmax(row.as_ref().iter().copied()));
    VerificationResult { accepted, bonus, flags }
}

/// Greedy draft from one position's heads: `logits` is (M + 1, V) with the
/// main head first; the draft takes the argmax of heads 0..M-1, so it has
/// length M.
pub fn medusa_draft(logits: ArrayView2<f64>) -> Draft {
    let m = logits.nrows().saturating_sub(1);
    Draft {
        tokens: (0..m).map(|k| argmax(logits.row(k).iter().copied())).collect(),
        source: DraftSource::MedusaHeads,
    }
}

/// Fragments of the source to try as drafts: first the `draft_len` tokens
/// following each occurrence of `tail`, then evenly spaced fragments until
/// `n` distinct drafts exist. Fragments running off the end are truncated.
pub fn extract_query_drafts(src: &[u32], tail: u32, n: usize, draft_len: usize) -> Vec<Draft> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    if src.is_empty() || n == 0 || draft_len == 0 {
        return Vec::new();
    }
    let fragment = |start: usize| src[start..(start + draft_len).min(src.len())].to_vec();
    let push = |frag: Vec<u32>, out: &mut Vec<Vec<u32>>| {
        if !frag.is_empty() && out.len() < n && !out.contains(&frag) {
            out.push(frag);
        }
    };
    for (i, &t) in src.iter().enumerate() {
        if t == tail && i + 1 < src.len() {
            push(fragment(i + 1), &mut out);
        }
    }
    if out.len() < n {
        if src.len() <= draft_len || n == 1 {
            push(fragment(0), &mut out);
        } else {
            let span = src.len() - draft_len;
            for i in 0..n {
                push(fragment(i * span / (n - 1)), &mut out);
            }
        }
    }
    out.into_iter()
        .map(|tokens| Draft {
            tokens,
            source: DraftSource::QueryFragment,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn zero_nucleus_accepts_only_argmax() {
        let probs = [vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3], vec![0.2, 0.2, 0.6]];
        let r = verify_draft(&probs, &[1, 0, 1], 0.0);
        assert_eq!(r.accepted, 2);
        assert_eq!(r.flags, vec![true, true, false]);
        assert_eq!(r.bonus, Some(2));
    }

    #[test]
    fn argmax_draft_is_fully_accepted() {
        let probs = [vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3], vec![0.3, 0.3, 0.4]];
        let r = verify_draft(&probs, &[1, 0], 0.5);
        assert_eq!(r.accepted, 2);
        assert_eq!(r.bonus, Some(2));
        let r = verify_draft(&probs, &[1, 0, 2], 0.0);
        assert_eq!(r.accepted, 3);
        assert_eq!(r.bonus, None);
    }

    #[test]
    fn hand_checked_nucleus_boundary() {
        // V = 4. Token 2 has mass above it 0.5 + 0.3 and its own 0.15: 0.95.
        let probs = [vec![0.5, 0.3, 0.15, 0.05]];
        assert_eq!(verify_draft(&probs, &[2], 0.9975).accepted, 1);
        assert_eq!(verify_draft(&probs, &[2], 0.95).accepted, 0);
        assert_eq!(verify_draft(&probs, &[3], 0.9975).accepted, 0);
        // The boundary is strict: a full unit of mass is never below p = 1.
        assert_eq!(verify_draft(&probs, &[2], 1.0).accepted, 1);
        assert_eq!(verify_draft(&probs, &[3], 1.0).accepted, 0);
    }

    #[test]
    fn rejection_stops_acceptance() {
        let probs = [vec![0.9, 0.1], vec![0.1, 0.9], vec![0.9, 0.1]];
        let r = verify_draft(&probs, &[0, 0, 0], 0.5);
        assert_eq!(r.flags, vec![true, false, false]);
        assert_eq!(r.bonus, Some(1));
    }

    #[test]
    fn medusa_draft_reads_planted_tokens() {
        let mut logits = Array2::zeros((4, 6));
        for (k, t) in [3usize, 5, 1, 4].into_iter().enumerate() {
            logits[[k, t]] = 10.0;
        }
        assert_eq!(medusa_draft(logits.view()).tokens, vec![3, 5, 1]);
        assert!(medusa_draft(Array2::zeros((1, 6)).view()).tokens.is_empty());
        assert_eq!(medusa_draft(Array2::zeros((21, 6)).view()).tokens.len(), 20);
    }

    #[test]
    fn query_drafts_follow_the_tail_token() {
        let src = [4, 5, 6, 4, 7, 8, 9, 10];
        let drafts = extract_query_drafts(&src, 4, 10, 3);
        assert_eq!(drafts[0].tokens, vec![5, 6, 4]);
        assert_eq!(drafts[1].tokens, vec![7, 8, 9]);
        assert!(drafts.len() <= 10);
        assert!(drafts.iter().all(|d| d.source == DraftSource::QueryFragment));
    }

    #[test]
    fn short_source_gives_one_truncated_fragment() {
        let drafts = extract_query_drafts(&[4, 5, 6], 9, 10, 10);
        assert_eq!(drafts.len(), 1);
        assert_eq!(drafts[0].tokens, vec![4, 5, 6]);
        assert!(extract_query_drafts(&[], 4, 10, 10).is_empty());
    }

    #[test]
    fn absent_tail_falls_back_to_even_offsets() {
        let src: Vec<u32> = (10..30).collect();
        let drafts = extract_query_drafts(&src, 4, 3, 5);
        let starts: Vec<u32> = drafts.iter().map(|d| d.tokens[0]).collect();
        assert_eq!(starts, vec![10, 17, 25]);
        assert!(drafts.iter().all(|d| d.tokens.len() == 5));
    }
}
