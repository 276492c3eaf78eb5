#![allow(dead_code)]

use std::sync::Arc;

use retrospec_core::decode::FnModel;
use retrospec_core::model::{forward, log_softmax, ModelConfig, ModelParameters, Transformer};
use retrospec_core::smiles::{BOS, EOS};

/// Random-weight toy model: V = 16, d = 32, 2 + 2 layers.
pub fn toy_model(seed: u64, medusa_heads: usize) -> Transformer {
    let cfg = ModelConfig {
        layers_enc: 2,
        layers_dec: 2,
        attn_heads: 4,
        d_model: 32,
        d_ff: 64,
        medusa_heads,
        medusa_hidden: 32,
        vocab_size: 16,
        max_len: 32,
        dropout: 0.0,
        seed,
    };
    Transformer::new(ModelParameters::init(&cfg, seed)).unwrap()
}

pub fn toy_source(seed: u64) -> Vec<u32> {
    let len = 3 + (seed % 5) as usize;
    let mut src: Vec<u32> = (0..len).map(|i| 4 + ((seed * 7 + i as u64 * 5) % 12) as u32).collect();
    src.push(EOS);
    src
}

/// Main-head logits after `prefix` (bos first), by full recomputation.
pub fn full_logits(model: &Transformer, src: &[u32], prefix: &[u32], head: usize) -> Vec<f64> {
    let (block, _) = forward(model, &[src.to_vec()], &[prefix.to_vec()], None).unwrap();
    let last = prefix.len() - 1;
    block.data.slice(ndarray::s![0, last, head, ..]).to_vec()
}

/// Naive beam search: every step recomputes every hypothesis from scratch,
/// expands it over the whole vocabulary, and keeps the best `k` among the
/// expansions and the finished hypotheses.
pub fn reference_beam(model: &Transformer, src: &[u32], k: usize, cap: usize) -> Vec<(Vec<u32>, f64)> {
    let mut beams: Vec<(Vec<u32>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
    while beams.iter().any(|b| !b.2) {
        let mut cands = Vec::new();
        for (tokens, score, finished) in &beams {
            if *finished {
                cands.push((tokens.clone(), *score, true));
                continue;
            }
            let mut prefix = vec![BOS];
            prefix.extend(tokens);
            let lp = log_softmax(&full_logits(model, src, &prefix, 0));
            for (v, l) in lp.iter().enumerate() {
                let mut t = tokens.clone();
                t.push(v as u32);
                let done = v as u32 == EOS || t.len() >= cap;
                cands.push((t, score + l, done));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(k);
        beams = cands;
    }
    beams.into_iter().map(|(t, s, _)| (t, s)).collect()
}

/// The same network exposed without a decoder cache: every call recomputes
/// the whole prefix.
pub fn recompute(model: Transformer) -> FnModel {
    let heads = model.config().medusa_heads;
    let max_len = model.config().max_len;
    let vocab = model.config().vocab_size;
    let model = Arc::new(model);
    let m2 = Arc::clone(&model);
    FnModel::new(vocab, max_len, move |src, prefix| full_logits(&model, src, prefix, 0))
        .with_heads(heads, move |src, prefix, k| full_logits(&m2, src, prefix, k))
}

/// Scripted model over V = 8 that follows `gold` (then eos) with near
/// certainty and sends every deviation straight to eos.
pub fn scripted(gold: Vec<u32>) -> FnModel {
    FnModel::new(8, 128, move |_, prefix| {
        let out = &prefix[1..];
        let on_path = out.len() <= gold.len() && out == &gold[..out.len()];
        let next = if on_path && out.len() < gold.len() { gold[out.len()] } else { EOS };
        (0..8).map(|v| if v == next { 10.0 } else { 0.0 }).collect()
    })
}
