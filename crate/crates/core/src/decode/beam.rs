use super::model::{DecodeModel, Step};
use super::{rank, row_slice, DecodeConfig, DecodeError, DecodeMetrics, Dist, Hypothesis, Strategy};
use crate::model::Heads;
use crate::smiles::{BOS, EOS, PAD};

pub(crate) struct Beam<S> {
    pub hyp: Hypothesis,
    /// Holds a prefix of `[bos] + hyp.tokens`.
    pub state: S,
}

impl<S> Beam<S> {
    /// Decoder inputs not yet fed into `state`.
    pub fn pending<M: DecodeModel<State = S> + ?Sized>(&self) -> Vec<u32> {
        let fed = M::state_len(&self.state);
        std::iter::once(BOS)
            .chain(self.hyp.tokens.iter().copied())
            .skip(fed)
            .collect()
    }
}

pub(crate) struct Session<M: DecodeModel + ?Sized> {
    pub memory: M::Memory,
    pub beams: Vec<Beam<M::State>>,
}

impl<M: DecodeModel + ?Sized> Session<M> {
    pub fn new(model: &M, src: &[u32]) -> Result<Self, DecodeError> {
        Ok(Self {
            memory: model.encode(src)?,
            beams: vec![Beam {
                hyp: Hypothesis::root(),
                state: model.empty_state(),
            }],
        })
    }

    pub fn done(&self) -> bool {
        self.beams.iter().all(|b| b.hyp.finished)
    }

    pub fn results(self) -> Vec<Hypothesis> {
        self.beams.into_iter().map(|b| b.hyp).collect()
    }
}

/// Beam search over one source.
pub fn beam_search<M: DecodeModel + ?Sized>(
    model: &M,
    src: &[u32],
    config: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, DecodeMetrics), DecodeError> {
    let (mut out, metrics) = beam_search_batch(model, std::slice::from_ref(&src.to_vec()), config)?;
    Ok((out.remove(0), metrics))
}

/// Beam search over a batch of sources in lockstep: one decoder call per
/// step covers every source. With [`Strategy::Bs`] finished hypotheses (and
/// finished sources) keep occupying rows, fed with pad, until the whole
/// batch is done; otherwise only unfinished hypotheses are fed.
pub fn beam_search_batch<M: DecodeModel + ?Sized>(
    model: &M,
    sources: &[Vec<u32>],
    config: &DecodeConfig,
) -> Result<(Vec<Vec<Hypothesis>>, DecodeMetrics), DecodeError> {
    config.validate()?;
    let pad_finished = config.strategy == Strategy::Bs;
    let cap = config.cap(model);
    let k = config.beam_size.min(model.vocab_size());
    let mut sessions = sources
        .iter()
        .map(|s| Session::new(model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut metrics = DecodeMetrics::default();

    while sessions.iter().any(|s| !s.done()) {
        // Rows as (session, beam, tokens).
        let mut plan = Vec::new();
        for (si, s) in sessions.iter().enumerate() {
            for (bi, b) in s.beams.iter().enumerate() {
                if !b.hyp.finished {
                    plan.push((si, bi, b.pending::<M>()));
                } else if pad_finished {
                    let pending = b.pending::<M>();
                    let tokens = if pending.is_empty() { vec![PAD] } else { pending };
                    plan.push((si, bi, tokens));
                }
            }
        }
        let outputs = {
            let mut states: Vec<Option<&mut M::State>> = Vec::new();
            let mut memories = Vec::new();
            for s in sessions.iter_mut() {
                let start = states.len();
                for b in s.beams.iter_mut() {
                    states.push(Some(&mut b.state));
                }
                memories.push((start, &s.memory));
            }
            let mut rows = Vec::with_capacity(plan.len());
            for (si, bi, tokens) in &plan {
                let (start, memory) = memories[*si];
                rows.push(Step {
                    memory,
                    state: states[start + bi].take().expect("row used once"),
                    tokens,
                });
            }
            metrics.record_call(rows.len());
            model.step(&mut rows, Heads::Main)?
        };

        let mut dists: Vec<Vec<Option<Dist>>> = sessions.iter().map(|s| s.beams.iter().map(|_| None).collect()).collect();
        for ((si, bi, _), out) in plan.iter().zip(&outputs) {
            if !sessions[*si].beams[*bi].hyp.finished {
                let last = out.main.nrows() - 1;
                dists[*si][*bi] = Some(Dist::from_logits(&row_slice(out.main.row(last))));
            }
        }
        for (s, dists) in sessions.iter_mut().zip(dists) {
            if s.done() {
                continue;
            }
            select(s, &dists, k, cap);
        }
    }
    Ok((sessions.into_iter().map(Session::results).collect(), metrics))
}

/// One beam-search selection: finished beams compete with every top-k
/// extension of the unfinished ones; the best `k` survive.
fn select<M: DecodeModel + ?Sized>(s: &mut Session<M>, dists: &[Option<Dist>], k: usize, cap: usize) {
    let mut pool: Vec<(Hypothesis, usize)> = Vec::new();
    for (bi, (beam, dist)) in s.beams.iter().zip(dists).enumerate() {
        match dist {
            None => pool.push((beam.hyp.clone(), bi)),
            Some(d) => {
                for &v in d.top(k) {
                    let mut tokens = beam.hyp.tokens.clone();
                    tokens.push(v);
                    let finished = v == EOS || tokens.len() >= cap;
                    pool.push((
                        Hypothesis {
                            tokens,
                            score: beam.hyp.score + d.logp[v as usize],
                            finished,
                        },
                        bi,
                    ));
                }
            }
        }
    }
    pool.sort_by(|a, b| rank(&a.0, &b.0));
    pool.truncate(k);
    s.beams = pool
        .into_iter()
        .map(|(hyp, parent)| Beam {
            hyp,
            state: s.beams[parent].state.clone(),
        })
        .collect();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::FnModel;

    fn table_model() -> FnModel {
        // V = 6: deterministic pseudo-random logits keyed on the prefix.
        FnModel::new(6, 8, |src, prefix| {
            let mut h: u64 = 1469598103934665603;
            for &t in src.iter().chain(prefix) {
                h = (h ^ t as u64).wrapping_mul(1099511628211);
            }
            (0..6)
                .map(|v| {
                    let x = (h ^ (v as u64 * 0x9E37_79B9)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                    ((x >> 40) as f64 / (1u64 << 24) as f64) * 4.0
                })
                .collect()
        })
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let model = table_model();
        let config = DecodeConfig {
            strategy: Strategy::BsOpt,
            beam_size: 1,
            max_len: 7,
            ..Default::default()
        };
        let (hyps, _) = beam_search(&model, &[4, 5, 2], &config).unwrap();
        let mut prefix = vec![BOS];
        let mut tokens = Vec::new();
        while tokens.len() < 7 {
            let logits = (model.main)(&[4, 5, 2], &prefix);
            let next = crate::decode::model::argmax(logits.into_iter());
            tokens.push(next);
            prefix.push(next);
            if next == EOS {
                break;
            }
        }
        assert_eq!(hyps[0].tokens, tokens);
    }

    #[test]
    fn standard_and_optimized_agree() {
        let model = table_model();
        for src in [vec![4, 2], vec![5, 5, 2], vec![3, 4, 5, 2]] {
            let mut config = DecodeConfig {
                strategy: Strategy::Bs,
                beam_size: 3,
                max_len: 7,
                ..Default::default()
            };
            let (a, ma) = beam_search(&model, &src, &config).unwrap();
            config.strategy = Strategy::BsOpt;
            let (b, mb) = beam_search(&model, &src, &config).unwrap();
            assert_eq!(a, b);
            assert_eq!(ma.model_calls, mb.model_calls);
            assert!(mb.mean_batch_size() <= ma.mean_batch_size());
        }
    }
}
