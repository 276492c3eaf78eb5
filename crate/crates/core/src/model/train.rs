use std::io::Write;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::Transformer;
use super::loss::{head_cross_entropy, head_weight, MedusaLoss, TrainBatch};
use super::ops::{
    attend, attend_backward, layer_norm_backward, layer_norm_cached, linear, linear_backward,
    linear_backward_into, silu, silu_backward, NormCache,
};
use super::params::{Attention, FeedForward, LayerNorm, MedusaHead, ModelParameters};
use super::{ModelConfig, ModelError};

/// Source and gold output ids for one reaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Learning rate at the last step relative to the peak (cosine decay).
    pub final_lr_ratio: f64,
    pub clip_norm: f64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            final_lr_ratio: 0.05,
            clip_norm: 1.0,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak_lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cosine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub per_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub heldout: MedusaLoss,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// CSV with columns `step,total_loss,loss_head_1..loss_head_{M+1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let heads = self.steps.first().map_or(0, |r| r.per_head.len());
        let mut header = vec!["step".to_owned(), "total_loss".to_owned()];
        header.extend((1..=heads).map(|k| format!("loss_head_{k}")));
        w.write_record(&header)?;
        for r in &self.steps {
            let mut rec = vec![r.step.to_string(), r.total.to_string()];
            rec.extend(r.per_head.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adam over the flattened parameter list.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(size: usize) -> Self {
        Self {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64, grad_scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut offset = 0;
        for (p, (_, _, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                let gi = g[i] * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            offset += p.len();
        }
    }
}

fn packed_spans<T>(rows: &[Vec<T>]) -> Vec<Range<usize>> {
    let mut start = 0;
    rows.iter()
        .map(|r| {
            let span = start..start + r.len();
            start = span.end;
            span
        })
        .collect()
}

struct Dropout<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, x: &mut Array2<f64>) -> Option<Array2<f64>> {
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
            if self.rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        *x *= &mask;
        Some(mask)
    }
}

fn apply_mask(dy: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

struct AttnTape {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    o: Array2<f64>,
    probs: Vec<Vec<Array2<f64>>>,
    mask: Option<Array2<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    attn: &Attention,
    q_spans: &[Range<usize>],
    k_spans: &[Range<usize>],
    heads: usize,
    causal: bool,
    dropout: &mut Option<Dropout<'_>>,
) -> (Array2<f64>, AttnTape) {
    let q = linear(xq, &attn.query);
    let k = linear(xkv, &attn.key);
    let v = linear(xkv, &attn.value);
    let mut o = Array2::zeros(q.raw_dim());
    let probs = q_spans
        .iter()
        .zip(k_spans)
        .map(|(qs, ks)| {
            attend(
                q.slice(s![qs.clone(), ..]),
                k.slice(s![ks.clone(), ..]),
                v.slice(s![ks.clone(), ..]),
                heads,
                causal.then_some(0),
                o.slice_mut(s![qs.clone(), ..]),
                true,
            )
        })
        .collect();
    let mut out = linear(o.view(), &attn.output);
    let mask = dropout.as_mut().and_then(|d| d.apply(&mut out));
    (out, AttnTape { q, k, v, o, probs, mask })
}

/// Returns gradients for the query-side and key/value-side inputs.
fn attention_backward(
    tape: &AttnTape,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    attn: &Attention,
    g: &mut Attention,
    q_spans: &[Range<usize>],
    k_spans: &[Range<usize>],
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dout = apply_mask(dout, &tape.mask);
    let d_o = linear_backward(tape.o.view(), &attn.output, dout.view(), &mut g.output);
    let mut dq = Array2::zeros(tape.q.raw_dim());
    let mut dk = Array2::zeros(tape.k.raw_dim());
    let mut dv = Array2::zeros(tape.v.raw_dim());
    for ((qs, ks), probs) in q_spans.iter().zip(k_spans).zip(&tape.probs) {
        attend_backward(
            tape.q.slice(s![qs.clone(), ..]),
            tape.k.slice(s![ks.clone(), ..]),
            tape.v.slice(s![ks.clone(), ..]),
            probs,
            d_o.slice(s![qs.clone(), ..]),
            dq.slice_mut(s![qs.clone(), ..]),
            dk.slice_mut(s![ks.clone(), ..]),
            dv.slice_mut(s![ks.clone(), ..]),
        );
    }
    let dxq = linear_backward(xq, &attn.query, dq.view(), &mut g.query);
    let mut dxkv = linear_backward(xkv, &attn.key, dk.view(), &mut g.key);
    linear_backward_into(xkv, &attn.value, dv.view(), &mut g.value, &mut dxkv);
    (dxq, dxkv)
}

struct FfTape {
    u: Array2<f64>,
    r: Array2<f64>,
    mask: Option<Array2<f64>>,
}

fn ff_forward(h: ArrayView2<f64>, ff: &FeedForward, dropout: &mut Option<Dropout<'_>>) -> (Array2<f64>, FfTape) {
    let u = linear(h, &ff.up);
    let r = u.mapv(|v| v.max(0.0));
    let mut out = linear(r.view(), &ff.down);
    let mask = dropout.as_mut().and_then(|d| d.apply(&mut out));
    (out, FfTape { u, r, mask })
}

fn ff_backward(tape: &FfTape, h: ArrayView2<f64>, ff: &FeedForward, g: &mut FeedForward, dout: &Array2<f64>) -> Array2<f64> {
    let dout = apply_mask(dout, &tape.mask);
    let mut dr = linear_backward(tape.r.view(), &ff.down, dout.view(), &mut g.down);
    ndarray::Zip::from(&mut dr).and(&tape.u).for_each(|d, &u| {
        if u <= 0.0 {
            *d = 0.0;
        }
    });
    linear_backward(h, &ff.up, dr.view(), &mut g.up)
}

struct NormedInput {
    h: Array2<f64>,
    cache: NormCache,
}

fn norm_forward(x: ArrayView2<f64>, ln: &LayerNorm) -> NormedInput {
    let (h, cache) = layer_norm_cached(x, ln);
    NormedInput { h, cache }
}

struct EncoderTape {
    attn_in: NormedInput,
    attn: AttnTape,
    ff_in: NormedInput,
    ff: FfTape,
}

struct DecoderTape {
    self_in: NormedInput,
    self_attn: AttnTape,
    cross_in: NormedInput,
    cross_attn: AttnTape,
    ff_in: NormedInput,
    ff: FfTape,
}

struct HeadTape {
    u: Array2<f64>,
    s: Array2<f64>,
    norm: NormCache,
    z: Array2<f64>,
}

fn medusa_forward(hidden: ArrayView2<f64>, head: &MedusaHead) -> HeadTape {
    let u = linear(hidden, &head.up);
    let s = silu(&u);
    let mut y = linear(s.view(), &head.down);
    y += &hidden;
    let (z, norm) = layer_norm_cached(y.view(), &head.norm);
    HeadTape { u, s, norm, z }
}

fn embed_backward(grad: &mut Array2<f64>, ids: &[u32], dx: &Array2<f64>, scale: f64) {
    for (&id, row) in ids.iter().zip(dx.rows()) {
        grad.row_mut(id as usize).scaled_add(scale, &row);
    }
}

/// Teacher-forced loss and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Transformer,
    batch: &TrainBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(MedusaLoss, ModelParameters), ModelError> {
    let p = model.params();
    let cfg = &p.config;
    let heads = cfg.attn_heads;
    let mut dropout = dropout_rng.map(|rng| Dropout { rate: cfg.dropout, rng });

    let dec_inputs = batch.decoder_inputs();
    for (s, t) in batch.sources.iter().zip(&dec_inputs) {
        let longest = s.len().max(t.len());
        if longest > cfg.max_len {
            return Err(ModelError::LengthOverflow {
                len: longest,
                max_len: cfg.max_len,
            });
        }
        if s.is_empty() {
            return Err(ModelError::EmptySource);
        }
    }
    let src_spans = packed_spans(&batch.sources);
    let tgt_spans = packed_spans(&dec_inputs);
    let src_ids: Vec<u32> = batch.sources.concat();
    let tgt_ids: Vec<u32> = dec_inputs.concat();
    for &id in src_ids.iter().chain(&tgt_ids) {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }

    let embed = |rows: &[Vec<u32>], total: usize| {
        let mut x = Array2::zeros((total, cfg.d_model));
        let mut at = 0;
        for r in rows {
            x.slice_mut(s![at..at + r.len(), ..]).assign(&model.embed(r, 0));
            at += r.len();
        }
        x
    };

    // Encoder.
    let mut x = embed(&batch.sources, src_ids.len());
    let src_mask = dropout.as_mut().and_then(|d| d.apply(&mut x));
    let mut enc_tapes = Vec::with_capacity(p.encoder.len());
    for layer in &p.encoder {
        let attn_in = norm_forward(x.view(), &layer.attn_norm);
        let (a, attn) = attention_forward(
            attn_in.h.view(),
            attn_in.h.view(),
            &layer.self_attn,
            &src_spans,
            &src_spans,
            heads,
            false,
            &mut dropout,
        );
        x += &a;
        let ff_in = norm_forward(x.view(), &layer.ff_norm);
        let (f, ff) = ff_forward(ff_in.h.view(), &layer.ff, &mut dropout);
        x += &f;
        enc_tapes.push(EncoderTape { attn_in, attn, ff_in, ff });
    }
    let enc_final = p.encoder_norm.as_ref().map(|n| norm_forward(x.view(), n));
    let memory = enc_final.as_ref().map_or_else(|| x.clone(), |n| n.h.clone());

    // Decoder.
    let mut y = embed(&dec_inputs, tgt_ids.len());
    let tgt_mask = dropout.as_mut().and_then(|d| d.apply(&mut y));
    let mut dec_tapes = Vec::with_capacity(p.decoder.len());
    for layer in &p.decoder {
        let self_in = norm_forward(y.view(), &layer.self_norm);
        let (a, self_attn) = attention_forward(
            self_in.h.view(),
            self_in.h.view(),
            &layer.self_attn,
            &tgt_spans,
            &tgt_spans,
            heads,
            true,
            &mut dropout,
        );
        y += &a;
        let cross_in = norm_forward(y.view(), &layer.cross_norm);
        let (c, cross_attn) = attention_forward(
            cross_in.h.view(),
            memory.view(),
            &layer.cross_attn,
            &tgt_spans,
            &src_spans,
            heads,
            false,
            &mut dropout,
        );
        y += &c;
        let ff_in = norm_forward(y.view(), &layer.ff_norm);
        let (f, ff) = ff_forward(ff_in.h.view(), &layer.ff, &mut dropout);
        y += &f;
        dec_tapes.push(DecoderTape {
            self_in,
            self_attn,
            cross_in,
            cross_attn,
            ff_in,
            ff,
        });
    }
    let dec_final = p.decoder_norm.as_ref().map(|n| norm_forward(y.view(), n));
    let hidden = dec_final.as_ref().map_or_else(|| y.clone(), |n| n.h.clone());

    // Heads and loss.
    let shifted = batch.shifted_targets(cfg.output_heads());
    let head_targets = |k: usize| -> Vec<Option<u32>> {
        tgt_spans
            .iter()
            .enumerate()
            .flat_map(|(b, span)| (0..span.len()).map(move |i| (b, i)))
            .map(|(b, i)| shifted.data[[b, i, k]])
            .collect()
    };
    let mut grads = p.zeros_like();
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    let mut per_head = Vec::with_capacity(cfg.output_heads());

    let logits = hidden.dot(&p.embedding.t());
    let (loss0, dlogits) = head_cross_entropy(logits.view(), &head_targets(0), head_weight(0));
    per_head.push(loss0);
    d_hidden += &dlogits.dot(&p.embedding);
    grads.embedding += &dlogits.t().dot(&hidden);

    for (k, (head, g_head)) in p.medusa.iter().zip(grads.medusa.iter_mut()).enumerate() {
        let tape = medusa_forward(hidden.view(), head);
        let logits = tape.z.dot(&p.embedding.t());
        let (loss, dlogits) = head_cross_entropy(logits.view(), &head_targets(k + 1), head_weight(k + 1));
        per_head.push(loss);
        let dz = dlogits.dot(&p.embedding);
        grads.embedding += &dlogits.t().dot(&tape.z);
        let dy = layer_norm_backward(&tape.norm, &head.norm, dz.view(), &mut g_head.norm);
        d_hidden += &dy;
        let ds = linear_backward(tape.s.view(), &head.down, dy.view(), &mut g_head.down);
        let du = silu_backward(&tape.u, &ds);
        linear_backward_into(hidden.view(), &head.up, du.view(), &mut g_head.up, &mut d_hidden);
    }
    let total: f64 = per_head.iter().enumerate().map(|(k, l)| l * head_weight(k)).sum();

    // Decoder backward.
    let mut dy = match (&dec_final, &p.decoder_norm, grads.decoder_norm.as_mut()) {
        (Some(n), Some(ln), Some(g)) => layer_norm_backward(&n.cache, ln, d_hidden.view(), g),
        _ => d_hidden,
    };
    let mut d_memory = Array2::zeros(memory.raw_dim());
    for ((layer, tape), g) in p.decoder.iter().zip(&dec_tapes).zip(grads.decoder.iter_mut()).rev() {
        let dh = ff_backward(&tape.ff, tape.ff_in.h.view(), &layer.ff, &mut g.ff, &dy);
        dy += &layer_norm_backward(&tape.ff_in.cache, &layer.ff_norm, dh.view(), &mut g.ff_norm);

        let (dq, dmem) = attention_backward(
            &tape.cross_attn,
            tape.cross_in.h.view(),
            memory.view(),
            &layer.cross_attn,
            &mut g.cross_attn,
            &tgt_spans,
            &src_spans,
            &dy,
        );
        d_memory += &dmem;
        dy += &layer_norm_backward(&tape.cross_in.cache, &layer.cross_norm, dq.view(), &mut g.cross_norm);

        let (dq, dkv) = attention_backward(
            &tape.self_attn,
            tape.self_in.h.view(),
            tape.self_in.h.view(),
            &layer.self_attn,
            &mut g.self_attn,
            &tgt_spans,
            &tgt_spans,
            &dy,
        );
        let dh = dq + dkv;
        dy += &layer_norm_backward(&tape.self_in.cache, &layer.self_norm, dh.view(), &mut g.self_norm);
    }
    embed_backward(&mut grads.embedding, &tgt_ids, &apply_mask(&dy, &tgt_mask), model.embed_scale());

    // Encoder backward.
    let mut dx = match (&enc_final, &p.encoder_norm, grads.encoder_norm.as_mut()) {
        (Some(n), Some(ln), Some(g)) => layer_norm_backward(&n.cache, ln, d_memory.view(), g),
        _ => d_memory,
    };
    for ((layer, tape), g) in p.encoder.iter().zip(&enc_tapes).zip(grads.encoder.iter_mut()).rev() {
        let dh = ff_backward(&tape.ff, tape.ff_in.h.view(), &layer.ff, &mut g.ff, &dx);
        dx += &layer_norm_backward(&tape.ff_in.cache, &layer.ff_norm, dh.view(), &mut g.ff_norm);
        let (dq, dkv) = attention_backward(
            &tape.attn,
            tape.attn_in.h.view(),
            tape.attn_in.h.view(),
            &layer.self_attn,
            &mut g.self_attn,
            &src_spans,
            &src_spans,
            &dx,
        );
        let dh = dq + dkv;
        dx += &layer_norm_backward(&tape.attn_in.cache, &layer.attn_norm, dh.view(), &mut g.attn_norm);
    }
    embed_backward(&mut grads.embedding, &src_ids, &apply_mask(&dx, &src_mask), model.embed_scale());

    Ok((MedusaLoss { total, per_head }, grads))
}

fn global_norm(grads: &ModelParameters) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, _, d)| d.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn batch_of(pairs: &[&EncodedPair]) -> TrainBatch {
    TrainBatch {
        sources: pairs.iter().map(|p| p.source.clone()).collect(),
        targets: pairs.iter().map(|p| p.target.clone()).collect(),
    }
}

/// Mean combined loss over `data` without dropout, in batches of `batch_size`.
pub fn evaluate_loss(model: &Transformer, data: &[EncodedPair], batch_size: usize) -> Result<MedusaLoss, ModelError> {
    let heads = model.config().output_heads();
    let mut total = 0.0;
    let mut per_head = vec![0.0; heads];
    let mut batches = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let (loss, _) = loss_and_grads(model, &batch_of(&refs), None)?;
        total += loss.total;
        for (acc, l) in per_head.iter_mut().zip(&loss.per_head) {
            *acc += l;
        }
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(MedusaLoss {
        total: total / n,
        per_head: per_head.into_iter().map(|l| l / n).collect(),
    })
}

/// Train from a fresh initialization (seeded by `config.seed`) with Adam.
///
/// Batches are drawn from a per-epoch shuffle seeded by `schedule.seed`, so
/// a fixed configuration always yields the same loss curve.
pub fn train(
    config: &ModelConfig,
    data: &[EncodedPair],
    heldout: &[EncodedPair],
    schedule: &TrainSchedule,
    mut on_step: impl FnMut(&StepRecord, Option<&EvalRecord>),
) -> Result<(ModelParameters, TrainLog), ModelError> {
    config.validate()?;
    let mut model = Transformer::new(ModelParameters::init(config, config.seed))?;
    let mut log = TrainLog::default();
    if schedule.steps == 0 {
        return Ok((model.into_params(), log));
    }
    if data.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let size = model.params().tensors().iter().map(|(_, _, d)| d.len()).sum();
    let mut adam = Adam::new(size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let batch_size = schedule.batch_size.max(1);

    for step in 0..schedule.steps {
        if cursor + batch_size > order.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(epoch));
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let picked: Vec<&EncodedPair> = order[cursor..(cursor + batch_size).min(order.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        cursor += batch_size;

        let mut drop_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (loss, grads) = loss_and_grads(&model, &batch_of(&picked), Some(&mut drop_rng))?;
        if !loss.total.is_finite() {
            return Err(ModelError::Diverged { step, loss: loss.total });
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(ModelError::Diverged { step, loss: norm });
        }
        let scale = if schedule.clip_norm > 0.0 && norm > schedule.clip_norm {
            schedule.clip_norm / norm
        } else {
            1.0
        };
        let lr = schedule.learning_rate(step);
        let mut params = model.into_params();
        adam.step(&mut params, &grads, lr, scale);
        params.meta.training_step = step as u64 + 1;
        model = Transformer::new(params)?;

        let record = StepRecord {
            step: step + 1,
            lr,
            total: loss.total,
            per_head: loss.per_head,
        };
        let last = step + 1 == schedule.steps;
        let eval = if !heldout.is_empty()
            && (last || (schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0))
        {
            let heldout = evaluate_loss(&model, heldout, batch_size)?;
            if !heldout.total.is_finite() {
                return Err(ModelError::Diverged { step, loss: heldout.total });
            }
            Some(EvalRecord { step: step + 1, heldout })
        } else {
            None
        };
        on_step(&record, eval.as_ref());
        log.steps.push(record);
        log.evals.extend(eval);
    }
    Ok((model.into_params(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, medusa_loss, DecoderRow, Heads};

    fn micro() -> ModelConfig {
        ModelConfig {
            layers_enc: 1,
            layers_dec: 1,
            attn_heads: 2,
            d_model: 8,
            d_ff: 16,
            medusa_heads: 2,
            medusa_hidden: 4,
            vocab_size: 6,
            max_len: 16,
            dropout: 0.0,
            seed: 11,
        }
    }

    fn micro_batch() -> TrainBatch {
        TrainBatch {
            sources: vec![vec![4, 5, 4, 2], vec![5, 2]],
            targets: vec![vec![5, 4], vec![4, 4, 5]],
        }
    }

    fn nudge(params: &mut ModelParameters, mut index: usize, delta: f64) {
        for t in params.tensors_mut() {
            if index < t.len() {
                t[index] += delta;
                return;
            }
            index -= t.len();
        }
        panic!("coordinate out of range");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = ModelParameters::init(&micro(), 5);
        let batch = micro_batch();
        let model = Transformer::new(params.clone()).unwrap();
        let (_, grads) = loss_and_grads(&model, &batch, None).unwrap();
        let flat: Vec<f64> = grads.tensors().iter().flat_map(|(_, _, d)| d.to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let i = rng.random_range(0..flat.len());
            let mut plus = params.clone();
            nudge(&mut plus, i, eps);
            let mut minus = params.clone();
            nudge(&mut minus, i, -eps);
            let lp = loss_and_grads(&Transformer::new(plus).unwrap(), &batch, None).unwrap().0.total;
            let lm = loss_and_grads(&Transformer::new(minus).unwrap(), &batch, None).unwrap().0.total;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (numeric - flat[i]).abs() / numeric.abs().max(flat[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn taped_loss_equals_inference_loss() {
        let model = Transformer::new(ModelParameters::init(&micro(), 2)).unwrap();
        let batch = micro_batch();
        let (taped, _) = loss_and_grads(&model, &batch, None).unwrap();
        let (block, _) = forward(&model, &batch.sources, &batch.decoder_inputs(), None).unwrap();
        let reference = medusa_loss(&block, &batch.shifted_targets(3));
        assert!((taped.total - reference.total).abs() < 1e-9);
        for (a, b) in taped.per_head.iter().zip(&reference.per_head) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn logits_shape_has_main_plus_extra_heads() {
        let mut cfg = micro();
        cfg.vocab_size = 40;
        cfg.medusa_heads = 20;
        let model = Transformer::new(ModelParameters::init(&cfg, 0)).unwrap();
        let src = vec![vec![7, 8, 2], vec![9, 2]];
        let tgt = vec![vec![1, 4, 5, 6, 7], vec![1, 4, 5, 6, 7]];
        let (block, _) = forward(&model, &src, &tgt, None).unwrap();
        assert_eq!(block.shape(), (2, 5, 21, 40));

        cfg.medusa_heads = 0;
        let model = Transformer::new(ModelParameters::init(&cfg, 0)).unwrap();
        let (block, _) = forward(&model, &src, &tgt, None).unwrap();
        assert_eq!(block.shape(), (2, 5, 1, 40));
        for row in block.data.lanes(ndarray::Axis(3)) {
            let total: f64 = super::super::log_softmax(row.as_slice().unwrap_or(&row.to_vec()))
                .iter()
                .map(|v| v.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let model = Transformer::new(ModelParameters::init(&micro(), 3)).unwrap();
        let src = vec![4, 5, 5, 2];
        let tgt = vec![1, 4, 5, 3, 4, 5];
        let (full, _) = forward(&model, &[src.clone()], &[tgt.clone()], None).unwrap();
        let memory = model.encode(&src).unwrap();
        let mut cache = model.new_cache();
        let mut rows = Vec::new();
        for chunk in [&tgt[..2], &tgt[2..3], &tgt[3..]] {
            let mut batch = [DecoderRow {
                memory: &memory,
                cache: &mut cache,
                tokens: chunk,
            }];
            rows.push(model.decode(&mut batch, Heads::All).unwrap().remove(0));
        }
        let mut pos = 0;
        for out in &rows {
            for p in 0..out.main.nrows() {
                for v in 0..6 {
                    assert!((out.main[[p, v]] - full.data[[0, pos, 0, v]]).abs() < 1e-5);
                    for h in 0..2 {
                        assert!((out.extra[[p, h, v]] - full.data[[0, pos, h + 1, v]]).abs() < 1e-5);
                    }
                }
                pos += 1;
            }
        }
        assert_eq!(pos, tgt.len());

        // Truncating the cache equals recomputing the shorter prefix.
        cache.truncate(3);
        let mut replay = model.new_cache();
        let mut batch = [DecoderRow {
            memory: &memory,
            cache: &mut replay,
            tokens: &tgt[..3],
        }];
        model.decode(&mut batch, Heads::Main).unwrap();
        assert_eq!(cache, replay);
    }

    #[test]
    fn future_tokens_do_not_change_earlier_logits() {
        let model = Transformer::new(ModelParameters::init(&micro(), 4)).unwrap();
        let src = vec![vec![4, 5, 2]];
        let (a, _) = forward(&model, &src, &[vec![1, 4, 5, 4]], None).unwrap();
        let (b, _) = forward(&model, &src, &[vec![1, 4, 3, 5]], None).unwrap();
        for pos in 0..2 {
            for h in 0..3 {
                for v in 0..6 {
                    assert_eq!(a.data[[0, pos, h, v]], b.data[[0, pos, h, v]]);
                }
            }
        }
        assert_ne!(a.data[[0, 2, 0, 0]], b.data[[0, 2, 0, 0]]);
    }

    #[test]
    fn zero_steps_return_init() {
        let cfg = micro();
        let data = vec![EncodedPair {
            source: vec![4, 2],
            target: vec![5],
        }];
        let schedule = TrainSchedule {
            steps: 0,
            ..TrainSchedule::default()
        };
        let (params, log) = train(&cfg, &data, &[], &schedule, |_, _| {}).unwrap();
        assert_eq!(params, ModelParameters::init(&cfg, cfg.seed));
        assert!(log.steps.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_learns_a_copy_task() {
        let mut cfg = micro();
        cfg.dropout = 0.1;
        let data: Vec<EncodedPair> = (0..16)
            .map(|i| {
                let body: Vec<u32> = (0..3).map(|j| 4 + ((i >> j) & 1) as u32).collect();
                let mut source = body.clone();
                source.push(2);
                EncodedPair { source, target: body }
            })
            .collect();
        let schedule = TrainSchedule {
            steps: 60,
            batch_size: 8,
            peak_lr: 1e-2,
            warmup_steps: 5,
            ..TrainSchedule::default()
        };
        let (p1, log1) = train(&cfg, &data, &data, &schedule, |_, _| {}).unwrap();
        let (p2, log2) = train(&cfg, &data, &data, &schedule, |_, _| {}).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert_eq!(p1.meta.training_step, 60);
        let first = log1.steps[0].total;
        let last = log1.evals.last().unwrap().heldout.total;
        assert!(last < first * 0.7, "loss {first} -> {last}");

        let mut csv = Vec::new();
        log1.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,total_loss,loss_head_1,loss_head_2,loss_head_3\n"));
        assert_eq!(text.lines().count(), 61);
    }
}
