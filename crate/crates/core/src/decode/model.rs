use ndarray::{Array2, Array3};

use crate::model::{DecoderCache, DecoderRow, EncoderMemory, Heads, ModelError, RowLogits, Transformer};
use crate::smiles::EOS;

/// What the decoding strategies need from a model: an encoder step and a
/// batched incremental decoder step over per-hypothesis states.
pub trait DecodeModel {
    type Memory;
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn extra_heads(&self) -> usize;
    /// Longest decoder input (bos included).
    fn max_len(&self) -> usize;
    fn encode(&self, src: &[u32]) -> Result<Self::Memory, ModelError>;
    fn empty_state(&self) -> Self::State;
    /// Decoder positions already held by `state`.
    fn state_len(state: &Self::State) -> usize;
    fn truncate(state: &mut Self::State, len: usize);
    /// Feed each row's tokens after its state and extend the state.
    fn step(&self, rows: &mut [Step<'_, Self>], heads: Heads) -> Result<Vec<RowLogits>, ModelError>;
}

pub struct Step<'a, M: DecodeModel + ?Sized> {
    pub memory: &'a M::Memory,
    pub state: &'a mut M::State,
    pub tokens: &'a [u32],
}

impl DecodeModel for Transformer {
    type Memory = EncoderMemory;
    type State = DecoderCache;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn extra_heads(&self) -> usize {
        self.config().medusa_heads
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn encode(&self, src: &[u32]) -> Result<EncoderMemory, ModelError> {
        Transformer::encode(self, src)
    }

    fn empty_state(&self) -> DecoderCache {
        self.new_cache()
    }

    fn state_len(state: &DecoderCache) -> usize {
        state.len()
    }

    fn truncate(state: &mut DecoderCache, len: usize) {
        state.truncate(len);
    }

    fn step(&self, rows: &mut [Step<'_, Self>], heads: Heads) -> Result<Vec<RowLogits>, ModelError> {
        let mut native: Vec<DecoderRow<'_>> = rows
            .iter_mut()
            .map(|r| DecoderRow {
                memory: r.memory,
                cache: &mut *r.state,
                tokens: r.tokens,
            })
            .collect();
        self.decode(&mut native, heads)
    }
}

type LogitsFn = dyn Fn(&[u32], &[u32]) -> Vec<f64>;
type HeadFn = dyn Fn(&[u32], &[u32], usize) -> Vec<f64>;

/// A model defined by closures over (source, decoder input so far). The
/// state is simply the decoder input history. Used for scripted scenarios.
pub struct FnModel {
    vocab: usize,
    max_len: usize,
    extra: usize,
    pub(crate) main: Box<LogitsFn>,
    heads: Box<HeadFn>,
}

impl FnModel {
    /// `main(src, prefix)` gives next-token logits after `prefix` (bos first).
    pub fn new(vocab: usize, max_len: usize, main: impl Fn(&[u32], &[u32]) -> Vec<f64> + 'static) -> Self {
        Self {
            vocab,
            max_len,
            extra: 0,
            main: Box::new(main),
            heads: Box::new(|_, _, _| Vec::new()),
        }
    }

    /// `heads(src, prefix, k)` gives logits of extra head `k` (1-based), which
    /// predicts the token `k + 1` positions after `prefix`.
    pub fn with_heads(mut self, extra: usize, heads: impl Fn(&[u32], &[u32], usize) -> Vec<f64> + 'static) -> Self {
        self.extra = extra;
        self.heads = Box::new(heads);
        self
    }
}

impl DecodeModel for FnModel {
    type Memory = Vec<u32>;
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn extra_heads(&self) -> usize {
        self.extra
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, src: &[u32]) -> Result<Vec<u32>, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        Ok(src.to_vec())
    }

    fn empty_state(&self) -> Vec<u32> {
        Vec::new()
    }

    fn state_len(state: &Vec<u32>) -> usize {
        state.len()
    }

    fn truncate(state: &mut Vec<u32>, len: usize) {
        state.truncate(len);
    }

    fn step(&self, rows: &mut [Step<'_, Self>], heads: Heads) -> Result<Vec<RowLogits>, ModelError> {
        let mut out = Vec::with_capacity(rows.len());
        for row in rows.iter_mut() {
            if row.tokens.is_empty() {
                return Err(ModelError::EmptyDecoderInput);
            }
            let start = row.state.len();
            if start + row.tokens.len() > self.max_len {
                return Err(ModelError::LengthOverflow {
                    len: start + row.tokens.len(),
                    max_len: self.max_len,
                });
            }
            row.state.extend_from_slice(row.tokens);
            let n = row.tokens.len();
            let mut main = Array2::zeros((n, self.vocab));
            for i in 0..n {
                let logits = (self.main)(row.memory, &row.state[..start + i + 1]);
                main.row_mut(i).assign(&ndarray::ArrayView1::from(&logits[..]));
            }
            let positions: Vec<usize> = match heads {
                Heads::Main => Vec::new(),
                Heads::ExtraAtLast => vec![n - 1],
                Heads::All => (0..n).collect(),
            };
            let mut extra = Array3::zeros((positions.len(), self.extra, self.vocab));
            for (pi, &i) in positions.iter().enumerate() {
                for k in 0..self.extra {
                    let logits = (self.heads)(row.memory, &row.state[..start + i + 1], k + 1);
                    extra
                        .slice_mut(ndarray::s![pi, k, ..])
                        .assign(&ndarray::ArrayView1::from(&logits[..]));
                }
            }
            out.push(RowLogits { main, extra });
        }
        Ok(out)
    }
}

/// Replaces the extra heads of a model with the main head's own greedy
/// continuation: head `k` puts all its mass on the token the main head would
/// emit `k + 1` steps ahead when decoding greedily.
pub struct EchoHeads<'m, M> {
    inner: &'m M,
    heads: usize,
}

impl<'m, M: DecodeModel> EchoHeads<'m, M> {
    pub fn new(inner: &'m M, heads: usize) -> Self {
        Self { inner, heads }
    }

    fn rollout(&self, memory: &M::Memory, mut state: M::State, first: u32) -> Result<Vec<u32>, ModelError> {
        let mut path = Vec::with_capacity(self.heads);
        let mut last = first;
        while path.len() < self.heads {
            if last == EOS || M::state_len(&state) >= self.inner.max_len() {
                path.push(EOS);
                continue;
            }
            let tokens = [last];
            let mut rows = [Step {
                memory,
                state: &mut state,
                tokens: &tokens,
            }];
            let out = self.inner.step(&mut rows, Heads::Main)?;
            last = argmax(out[0].main.row(0).iter().copied());
            path.push(last);
        }
        Ok(path)
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> u32 {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best.0
}

impl<M: DecodeModel> DecodeModel for EchoHeads<'_, M> {
    type Memory = M::Memory;
    type State = M::State;

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn extra_heads(&self) -> usize {
        self.heads
    }

    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    fn encode(&self, src: &[u32]) -> Result<M::Memory, ModelError> {
        self.inner.encode(src)
    }

    fn empty_state(&self) -> M::State {
        self.inner.empty_state()
    }

    fn state_len(state: &M::State) -> usize {
        M::state_len(state)
    }

    fn truncate(state: &mut M::State, len: usize) {
        M::truncate(state, len)
    }

    fn step(&self, rows: &mut [Step<'_, Self>], heads: Heads) -> Result<Vec<RowLogits>, ModelError> {
        let starts: Vec<usize> = rows.iter().map(|r| M::state_len(r.state)).collect();
        let mut inner_rows: Vec<Step<'_, M>> = rows
            .iter_mut()
            .map(|r| Step {
                memory: r.memory,
                state: &mut *r.state,
                tokens: r.tokens,
            })
            .collect();
        let mut out = self.inner.step(&mut inner_rows, Heads::Main)?;
        let vocab = self.inner.vocab_size();
        for ((row, logits), start) in rows.iter().zip(out.iter_mut()).zip(starts) {
            let n = row.tokens.len();
            let positions: Vec<usize> = match heads {
                Heads::Main => Vec::new(),
                Heads::ExtraAtLast => vec![n - 1],
                Heads::All => (0..n).collect(),
            };
            let mut extra = Array3::from_elem((positions.len(), self.heads, vocab), -30.0);
            for (pi, &i) in positions.iter().enumerate() {
                let mut state = row.state.clone();
                M::truncate(&mut state, start + i + 1);
                let first = argmax(logits.main.row(i).iter().copied());
                for (k, token) in self.rollout(row.memory, state, first)?.into_iter().enumerate() {
                    extra[[pi, k, token as usize]] = 0.0;
                }
            }
            logits.extra = extra;
        }
        Ok(out)
    }
}
