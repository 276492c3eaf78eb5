use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use super::ops::{attend, layer_norm, linear, positional_table, relu_inplace, silu};
use super::params::{FeedForward, MedusaHead, ModelParameters};
use super::{ModelConfig, ModelError};

/// Immutable inference wrapper around trained parameters.
#[derive(Debug, Clone)]
pub struct Transformer {
    params: ModelParameters,
    positions: Array2<f64>,
    embed_scale: f64,
}

/// Encoder output projected into each decoder layer's cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention keys and values for a committed decoder prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    width: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drop every position at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for k in &mut self.keys {
            k.truncate(len * self.width);
        }
        for v in &mut self.values {
            v.truncate(len * self.width);
        }
        self.len = len;
    }
}

/// Which heads to evaluate in a decoder call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    /// Main head at every new position.
    Main,
    /// Main head everywhere plus the extra heads at the last new position.
    ExtraAtLast,
    /// Every head at every new position.
    All,
}

/// One sequence row of a batched decoder call: the new tokens are appended
/// after the positions already in `cache`.
pub struct DecoderRow<'a> {
    pub memory: &'a EncoderMemory,
    pub cache: &'a mut DecoderCache,
    pub tokens: &'a [u32],
}

#[derive(Debug, Clone)]
pub struct RowLogits {
    /// (new positions, vocab)
    pub main: Array2<f64>,
    /// (positions, extra heads, vocab); the positions are the last new one
    /// for [`Heads::ExtraAtLast`] and all new ones for [`Heads::All`].
    pub extra: Array3<f64>,
}

impl Transformer {
    pub fn new(params: ModelParameters) -> Result<Self, ModelError> {
        params.config.validate()?;
        let positions = positional_table(params.config.max_len, params.config.d_model);
        let embed_scale = (params.config.d_model as f64).sqrt();
        Ok(Self {
            params,
            positions,
            embed_scale,
        })
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn new_cache(&self) -> DecoderCache {
        let layers = self.params.decoder.len();
        DecoderCache {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            width: self.params.config.d_model,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        let vocab = self.params.config.vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    pub(crate) fn embed(&self, ids: &[u32], start: usize) -> Array2<f64> {
        let d = self.params.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (i, (&id, mut row)) in ids.iter().zip(x.rows_mut()).enumerate() {
            row.assign(&self.params.embedding.row(id as usize));
            row *= self.embed_scale;
            row += &self.positions.row(start + i);
        }
        x
    }

    pub(crate) fn embed_scale(&self) -> f64 {
        self.embed_scale
    }

    pub fn encode(&self, src: &[u32]) -> Result<EncoderMemory, ModelError> {
        let cfg = &self.params.config;
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        if src.len() > cfg.max_len {
            return Err(ModelError::LengthOverflow {
                len: src.len(),
                max_len: cfg.max_len,
            });
        }
        self.check_ids(src)?;
        let mut x = self.embed(src, 0);
        for layer in &self.params.encoder {
            let h = layer_norm(x.view(), &layer.attn_norm);
            let q = linear(h.view(), &layer.self_attn.query);
            let k = linear(h.view(), &layer.self_attn.key);
            let v = linear(h.view(), &layer.self_attn.value);
            let mut o = Array2::zeros(x.raw_dim());
            attend(q.view(), k.view(), v.view(), cfg.attn_heads, None, o.view_mut(), false);
            x += &linear(o.view(), &layer.self_attn.output);
            let h = layer_norm(x.view(), &layer.ff_norm);
            x += &feed_forward(h.view(), &layer.ff);
        }
        if let Some(norm) = &self.params.encoder_norm {
            x = layer_norm(x.view(), norm);
        }
        let (keys, values) = self
            .params
            .decoder
            .iter()
            .map(|l| (linear(x.view(), &l.cross_attn.key), linear(x.view(), &l.cross_attn.value)))
            .unzip();
        Ok(EncoderMemory {
            keys,
            values,
            len: src.len(),
        })
    }

    /// One batched decoder call. Each row's cache is extended by its new tokens.
    pub fn decode(&self, rows: &mut [DecoderRow<'_>], heads: Heads) -> Result<Vec<RowLogits>, ModelError> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let mut spans = Vec::with_capacity(rows.len());
        let mut total = 0;
        for row in rows.iter() {
            if row.tokens.is_empty() {
                return Err(ModelError::EmptyDecoderInput);
            }
            let end = row.cache.len + row.tokens.len();
            if end > cfg.max_len {
                return Err(ModelError::LengthOverflow {
                    len: end,
                    max_len: cfg.max_len,
                });
            }
            self.check_ids(row.tokens)?;
            spans.push(total..total + row.tokens.len());
            total += row.tokens.len();
        }

        let mut x = Array2::zeros((total, d));
        for (row, span) in rows.iter().zip(&spans) {
            x.slice_mut(s![span.clone(), ..])
                .assign(&self.embed(row.tokens, row.cache.len));
        }

        for (li, layer) in self.params.decoder.iter().enumerate() {
            let h = layer_norm(x.view(), &layer.self_norm);
            let q = linear(h.view(), &layer.self_attn.query);
            let k = linear(h.view(), &layer.self_attn.key);
            let v = linear(h.view(), &layer.self_attn.value);
            let mut o = Array2::zeros((total, d));
            for (row, span) in rows.iter_mut().zip(&spans) {
                let past = row.cache.len;
                let cache_k = &mut row.cache.keys[li];
                let cache_v = &mut row.cache.values[li];
                cache_k.extend(k.slice(s![span.clone(), ..]).iter());
                cache_v.extend(v.slice(s![span.clone(), ..]).iter());
                let n = past + span.len();
                let keys = ArrayView2::from_shape((n, d), &cache_k[..]).expect("cache shape");
                let values = ArrayView2::from_shape((n, d), &cache_v[..]).expect("cache shape");
                attend(
                    q.slice(s![span.clone(), ..]),
                    keys,
                    values,
                    cfg.attn_heads,
                    Some(past),
                    o.slice_mut(s![span.clone(), ..]),
                    false,
                );
            }
            x += &linear(o.view(), &layer.self_attn.output);

            let h = layer_norm(x.view(), &layer.cross_norm);
            let q = linear(h.view(), &layer.cross_attn.query);
            let mut o = Array2::zeros((total, d));
            for (row, span) in rows.iter().zip(&spans) {
                attend(
                    q.slice(s![span.clone(), ..]),
                    row.memory.keys[li].view(),
                    row.memory.values[li].view(),
                    cfg.attn_heads,
                    None,
                    o.slice_mut(s![span.clone(), ..]),
                    false,
                );
            }
            x += &linear(o.view(), &layer.cross_attn.output);

            let h = layer_norm(x.view(), &layer.ff_norm);
            x += &feed_forward(h.view(), &layer.ff);
        }
        for row in rows.iter_mut() {
            row.cache.len += row.tokens.len();
        }
        if let Some(norm) = &self.params.decoder_norm {
            x = layer_norm(x.view(), norm);
        }

        let main = x.dot(&self.params.embedding.t());
        let extra_rows: Vec<usize> = match heads {
            Heads::Main => Vec::new(),
            Heads::ExtraAtLast => spans.iter().map(|sp| sp.end - 1).collect(),
            Heads::All => (0..total).collect(),
        };
        let extra = if extra_rows.is_empty() || self.params.medusa.is_empty() {
            None
        } else {
            let hidden = x.select(Axis(0), &extra_rows);
            Some(
                self.params
                    .medusa
                    .iter()
                    .map(|head| medusa_head(hidden.view(), head).dot(&self.params.embedding.t()))
                    .collect::<Vec<_>>(),
            )
        };

        let vocab = cfg.vocab_size;
        let m = self.params.medusa.len();
        let mut out = Vec::with_capacity(rows.len());
        let mut extra_cursor = 0;
        for span in &spans {
            let positions = match heads {
                Heads::Main => 0,
                Heads::ExtraAtLast => 1,
                Heads::All => span.len(),
            };
            let mut block = Array3::zeros((positions, m, vocab));
            if let Some(per_head) = &extra {
                for p in 0..positions {
                    for (hi, logits) in per_head.iter().enumerate() {
                        block
                            .slice_mut(s![p, hi, ..])
                            .assign(&logits.row(extra_cursor + p));
                    }
                }
            }
            extra_cursor += positions;
            out.push(RowLogits {
                main: main.slice(s![span.clone(), ..]).to_owned(),
                extra: block,
            });
        }
        Ok(out)
    }
}

fn feed_forward(h: ArrayView2<f64>, ff: &FeedForward) -> Array2<f64> {
    let mut u = linear(h, &ff.up);
    relu_inplace(&mut u);
    linear(u.view(), &ff.down)
}

fn medusa_head(hidden: ArrayView2<f64>, head: &MedusaHead) -> Array2<f64> {
    let u = linear(hidden, &head.up);
    let mut y = linear(silu(&u).view(), &head.down);
    y += &hidden;
    layer_norm(y.view(), &head.norm)
}

/// Logits of shape (batch, length, heads, vocab). Head 0 is the main
/// next-token head; head `k` predicts the token `k + 1` positions ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBlock {
    pub data: ndarray::Array4<f64>,
    /// Number of valid positions per batch row; later positions are zero.
    pub lengths: Vec<usize>,
}

impl LogitsBlock {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }
}

/// Batched forward pass returning every head at every new decoder position.
///
/// Without caches the decoder starts from an empty prefix; with caches only
/// the new positions are computed and the caches are extended.
pub fn forward(
    model: &Transformer,
    src_batch: &[Vec<u32>],
    tgt_batch: &[Vec<u32>],
    caches: Option<Vec<DecoderCache>>,
) -> Result<(LogitsBlock, Vec<DecoderCache>), ModelError> {
    if src_batch.len() != tgt_batch.len() {
        return Err(ModelError::BatchMismatch {
            sources: src_batch.len(),
            targets: tgt_batch.len(),
        });
    }
    let memories = src_batch
        .iter()
        .map(|s| model.encode(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut caches = caches.unwrap_or_else(|| vec![model.new_cache(); src_batch.len()]);
    if caches.len() != src_batch.len() {
        return Err(ModelError::BatchMismatch {
            sources: src_batch.len(),
            targets: caches.len(),
        });
    }
    let outputs = {
        let mut rows: Vec<DecoderRow<'_>> = memories
            .iter()
            .zip(caches.iter_mut())
            .zip(tgt_batch)
            .map(|((memory, cache), tokens)| DecoderRow {
                memory,
                cache,
                tokens,
            })
            .collect();
        model.decode(&mut rows, Heads::All)?
    };
    let cfg = model.config();
    let len = tgt_batch.iter().map(Vec::len).max().unwrap_or(0);
    let mut data = ndarray::Array4::zeros((src_batch.len(), len, cfg.output_heads(), cfg.vocab_size));
    for (b, out) in outputs.iter().enumerate() {
        for p in 0..out.main.nrows() {
            data.slice_mut(s![b, p, 0, ..]).assign(&out.main.row(p));
            for hi in 0..out.extra.dim().1 {
                data.slice_mut(s![b, p, hi + 1, ..])
                    .assign(&out.extra.slice(s![p, hi, ..]));
            }
        }
    }
    Ok((
        LogitsBlock {
            data,
            lengths: tgt_batch.iter().map(Vec::len).collect(),
        },
        caches,
    ))
}
