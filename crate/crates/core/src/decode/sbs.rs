use ndarray::Array2;

use super::beam::{Beam, Session};
use super::model::{DecodeModel, Step};
use super::verify::{extract_query_drafts, medusa_draft, verify_draft};
use super::{rank, row_slice, DecodeConfig, DecodeError, DecodeMetrics, Dist, Hypothesis, Strategy};
use crate::model::{Heads, RowLogits};
use crate::smiles::{BOS, EOS};

/// Decoding state of one source under speculative beam search.
pub struct SbsSession<M: DecodeModel + ?Sized> {
    inner: Session<M>,
    /// Source ids without the trailing eos, for query-fragment drafts.
    query: Vec<u32>,
}

impl<M: DecodeModel + ?Sized> SbsSession<M> {
    pub fn new(model: &M, src: &[u32]) -> Result<Self, DecodeError> {
        let query = match src.split_last() {
            Some((&EOS, rest)) => rest.to_vec(),
            _ => src.to_vec(),
        };
        Ok(Self {
            inner: Session::new(model, src)?,
            query,
        })
    }

    pub fn beams(&self) -> impl Iterator<Item = &Hypothesis> {
        self.inner.beams.iter().map(|b| &b.hyp)
    }

    pub fn done(&self) -> bool {
        self.inner.done()
    }

    pub fn into_results(self) -> Vec<Hypothesis> {
        self.inner.results()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleReport {
    /// Decoder calls made in this cycle.
    pub calls: usize,
    /// New candidate sequences pooled across all beams before ranking.
    pub candidates: usize,
}

/// Verification outcome of one unfinished beam.
struct Outcome<S> {
    draft: Vec<u32>,
    accepted: usize,
    /// `dists[j]` is the main-head distribution after `draft[..j]`.
    dists: Vec<Dist>,
    /// Replacement state when verification ran on a scratch copy.
    state: Option<S>,
}

/// Longest draft that still leaves room for the bonus token, cut after eos.
fn fit_draft(mut draft: Vec<u32>, committed: usize, cap: usize, draft_len: usize) -> Vec<u32> {
    draft.truncate(draft_len.min(cap.saturating_sub(committed + 1)));
    if let Some(i) = draft.iter().position(|&t| t == EOS) {
        draft.truncate(i + 1);
    }
    draft
}

fn last_token(hyp: &Hypothesis) -> u32 {
    hyp.tokens.last().copied().unwrap_or(BOS)
}

fn call<M: DecodeModel + ?Sized>(
    model: &M,
    mut rows: Vec<Step<'_, M>>,
    heads: Heads,
    metrics: &mut DecodeMetrics,
    report: &mut CycleReport,
) -> Result<Vec<RowLogits>, DecodeError> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    metrics.record_call(rows.len());
    report.calls += 1;
    Ok(model.step(&mut rows, heads)?)
}

/// Draft with the Medusa heads (call 1), then verify every draft with the
/// main head (call 2).
fn medusa_round<M: DecodeModel + ?Sized>(
    model: &M,
    sessions: &mut [SbsSession<M>],
    config: &DecodeConfig,
    cap: usize,
    metrics: &mut DecodeMetrics,
    report: &mut CycleReport,
) -> Result<Vec<Vec<Option<Outcome<M::State>>>>, DecodeError> {
    let pending: Vec<Vec<Vec<u32>>> = sessions
        .iter()
        .map(|s| s.inner.beams.iter().map(|b| b.pending::<M>()).collect())
        .collect();
    let first = {
        let mut rows = Vec::new();
        for (s, pend) in sessions.iter_mut().zip(&pending) {
            for (b, tokens) in s.inner.beams.iter_mut().zip(pend) {
                if !b.hyp.finished {
                    rows.push(Step {
                        memory: &s.inner.memory,
                        state: &mut b.state,
                        tokens,
                    });
                }
            }
        }
        call(model, rows, Heads::ExtraAtLast, metrics, report)?
    };

    let mut first = first.into_iter();
    let mut outcomes: Vec<Vec<Option<Outcome<M::State>>>> = Vec::with_capacity(sessions.len());
    for s in sessions.iter() {
        let mut row = Vec::with_capacity(s.inner.beams.len());
        for b in &s.inner.beams {
            if b.hyp.finished {
                row.push(None);
                continue;
            }
            let out = first.next().expect("one output per row");
            let last = out.main.nrows() - 1;
            let mut heads = Array2::zeros((1 + out.extra.dim().1, out.main.ncols()));
            heads.row_mut(0).assign(&out.main.row(last));
            for k in 0..out.extra.dim().1 {
                heads.row_mut(k + 1).assign(&out.extra.slice(ndarray::s![0, k, ..]));
            }
            let draft = fit_draft(medusa_draft(heads.view()).tokens, b.hyp.tokens.len(), cap, config.draft_len);
            row.push(Some(Outcome {
                draft,
                accepted: 0,
                dists: vec![Dist::from_logits(&row_slice(out.main.row(last)))],
                state: None,
            }));
        }
        outcomes.push(row);
    }

    let second = {
        let mut rows = Vec::new();
        for (s, outs) in sessions.iter_mut().zip(&outcomes) {
            for (b, o) in s.inner.beams.iter_mut().zip(outs) {
                if let Some(o) = o.as_ref().filter(|o| !o.draft.is_empty()) {
                    rows.push(Step {
                        memory: &s.inner.memory,
                        state: &mut b.state,
                        tokens: &o.draft,
                    });
                }
            }
        }
        call(model, rows, Heads::Main, metrics, report)?
    };
    let mut second = second.into_iter();
    for o in outcomes.iter_mut().flatten().flatten() {
        if o.draft.is_empty() {
            continue;
        }
        let out = second.next().expect("one output per row");
        o.dists
            .extend(out.main.rows().into_iter().map(|r| Dist::from_logits(&row_slice(r))));
        let probs: Vec<Vec<f64>> = o.dists.iter().map(Dist::probs).collect();
        o.accepted = verify_draft(&probs, &o.draft, config.nucleus).accepted;
        metrics.drafted_tokens += o.draft.len() as u64;
        metrics.accepted_tokens += o.accepted as u64;
    }
    Ok(outcomes)
}

/// Verify every query-fragment draft of every beam in one call and keep,
/// per beam, the draft with the most accepted tokens.
fn heuristic_round<M: DecodeModel + ?Sized>(
    model: &M,
    sessions: &mut [SbsSession<M>],
    config: &DecodeConfig,
    cap: usize,
    metrics: &mut DecodeMetrics,
    report: &mut CycleReport,
) -> Result<Vec<Vec<Option<Outcome<M::State>>>>, DecodeError> {
    // Per unfinished beam: (session, beam, pending, drafts).
    let mut plan = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        for (bi, b) in s.inner.beams.iter().enumerate() {
            if b.hyp.finished {
                continue;
            }
            let mut drafts: Vec<Vec<u32>> = Vec::new();
            for d in extract_query_drafts(&s.query, last_token(&b.hyp), config.n_drafts, config.draft_len) {
                let d = fit_draft(d.tokens, b.hyp.tokens.len(), cap, config.draft_len);
                if !d.is_empty() && !drafts.contains(&d) {
                    drafts.push(d);
                }
            }
            if drafts.is_empty() {
                drafts.push(Vec::new());
            }
            plan.push((si, bi, b.pending::<M>(), drafts));
        }
    }
    let mut scratch: Vec<M::State> = Vec::new();
    let mut inputs: Vec<Vec<u32>> = Vec::new();
    for (si, bi, pending, drafts) in &plan {
        for d in drafts {
            scratch.push(sessions[*si].inner.beams[*bi].state.clone());
            inputs.push(pending.iter().chain(d).copied().collect());
        }
    }
    let outputs = {
        let mut rows = Vec::with_capacity(scratch.len());
        let mut states = scratch.iter_mut();
        let mut tokens = inputs.iter();
        for (si, _, _, drafts) in &plan {
            for _ in drafts {
                rows.push(Step {
                    memory: &sessions[*si].inner.memory,
                    state: states.next().expect("scratch per row"),
                    tokens: tokens.next().expect("tokens per row"),
                });
            }
        }
        call(model, rows, Heads::Main, metrics, report)?
    };

    let mut outcomes: Vec<Vec<Option<Outcome<M::State>>>> =
        sessions.iter().map(|s| s.inner.beams.iter().map(|_| None).collect()).collect();
    let mut outputs = outputs.into_iter();
    let mut scratch = scratch.into_iter();
    for (si, bi, pending, drafts) in plan {
        let mut best: Option<Outcome<M::State>> = None;
        for draft in drafts {
            let out = outputs.next().expect("one output per row");
            let state = scratch.next().expect("scratch per row");
            let dists: Vec<Dist> = out
                .main
                .rows()
                .into_iter()
                .skip(pending.len() - 1)
                .map(|r| Dist::from_logits(&row_slice(r)))
                .collect();
            let probs: Vec<Vec<f64>> = dists.iter().map(Dist::probs).collect();
            let accepted = verify_draft(&probs, &draft, config.nucleus).accepted;
            if best.as_ref().is_none_or(|b| accepted > b.accepted) {
                best = Some(Outcome {
                    draft,
                    accepted,
                    dists,
                    state: Some(state),
                });
            }
        }
        let best = best.expect("at least one draft row");
        metrics.drafted_tokens += best.draft.len() as u64;
        metrics.accepted_tokens += best.accepted as u64;
        outcomes[si][bi] = Some(best);
    }
    Ok(outcomes)
}

/// Leaf candidates of one verified beam: for every accepted prefix length
/// `j` the top-k next tokens, except the accepted draft token itself, which
/// is an inner node of a longer candidate. Returns (hypothesis, number of
/// decoder positions of the parent state to keep).
fn leaf_candidates<S>(
    hyp: &Hypothesis,
    o: &Outcome<S>,
    k: usize,
    cap: usize,
) -> Vec<(Hypothesis, usize)> {
    let mut out = Vec::new();
    let mut score = hyp.score;
    let mut tokens = hyp.tokens.clone();
    for j in 0..=o.accepted {
        let dist = &o.dists[j];
        let inner = (j < o.accepted).then(|| o.draft[j]);
        let mut leaf = |v: u32, tokens: &Vec<u32>| {
            let mut t = tokens.clone();
            t.push(v);
            let finished = v == EOS || t.len() >= cap;
            out.push((
                Hypothesis {
                    tokens: t,
                    score: score + dist.logp[v as usize],
                    finished,
                },
                1 + hyp.tokens.len() + j,
            ));
        };
        for &v in dist.top(k) {
            if inner == Some(v) && v != EOS {
                continue;
            }
            leaf(v, &tokens);
        }
        match inner {
            Some(EOS) => {
                if !dist.top(k).contains(&EOS) {
                    leaf(EOS, &tokens);
                }
                break;
            }
            Some(v) => {
                score += dist.logp[v as usize];
                tokens.push(v);
            }
            None => {}
        }
    }
    out
}

/// One speculative cycle over every unfinished source: draft, verify, pool
/// the leaf candidates of all beams with the finished hypotheses, keep the
/// best `beam_size`.
pub fn sbs_cycle<M: DecodeModel + ?Sized>(
    model: &M,
    sessions: &mut [SbsSession<M>],
    config: &DecodeConfig,
    metrics: &mut DecodeMetrics,
) -> Result<CycleReport, DecodeError> {
    let cap = config.cap(model);
    let k = config.beam_size.min(model.vocab_size());
    let mut report = CycleReport::default();
    let outcomes = match config.strategy {
        Strategy::Msbs => medusa_round(model, sessions, config, cap, metrics, &mut report)?,
        Strategy::Hsbs => heuristic_round(model, sessions, config, cap, metrics, &mut report)?,
        other => {
            return Err(DecodeError::InvalidConfig(format!(
                "{other} is not a speculative strategy"
            )))
        }
    };
    metrics.cycles += 1;

    for (s, mut outs) in sessions.iter_mut().zip(outcomes) {
        if s.done() {
            continue;
        }
        let mut pool: Vec<(Hypothesis, usize, Option<usize>)> = Vec::new();
        for (bi, (b, o)) in s.inner.beams.iter().zip(&outs).enumerate() {
            match o {
                None => pool.push((b.hyp.clone(), bi, None)),
                Some(o) => {
                    let leaves = leaf_candidates(&b.hyp, o, k, cap);
                    report.candidates += leaves.len();
                    pool.extend(leaves.into_iter().map(|(h, keep)| (h, bi, Some(keep))));
                }
            }
        }
        pool.sort_by(|a, b| rank(&a.0, &b.0));
        pool.truncate(k);
        let parents: Vec<M::State> = s
            .inner
            .beams
            .iter()
            .zip(outs.iter_mut())
            .map(|(b, o)| match o.as_mut().and_then(|o| o.state.take()) {
                Some(state) => state,
                None => b.state.clone(),
            })
            .collect();
        s.inner.beams = pool
            .into_iter()
            .map(|(hyp, parent, keep)| {
                let mut state = parents[parent].clone();
                if let Some(keep) = keep {
                    M::truncate(&mut state, keep);
                }
                Beam { hyp, state }
            })
            .collect();
    }
    Ok(report)
}

/// Speculative beam search over one source.
pub fn sbs_generate<M: DecodeModel + ?Sized>(
    model: &M,
    src: &[u32],
    config: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, DecodeMetrics), DecodeError> {
    let (mut out, metrics) = sbs_generate_batch(model, std::slice::from_ref(&src.to_vec()), config)?;
    Ok((out.remove(0), metrics))
}

/// Speculative beam search over a batch of sources in lockstep.
pub fn sbs_generate_batch<M: DecodeModel + ?Sized>(
    model: &M,
    sources: &[Vec<u32>],
    config: &DecodeConfig,
) -> Result<(Vec<Vec<Hypothesis>>, DecodeMetrics), DecodeError> {
    config.validate()?;
    let mut sessions = sources
        .iter()
        .map(|s| SbsSession::new(model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut metrics = DecodeMetrics::default();
    while sessions.iter().any(|s| !s.done()) {
        sbs_cycle(model, &mut sessions, config, &mut metrics)?;
    }
    Ok((sessions.into_iter().map(SbsSession::into_results).collect(), metrics))
}
