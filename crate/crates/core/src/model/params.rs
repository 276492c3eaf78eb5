use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (in, out); applied as `x · W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub self_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// One extra decoding head: `norm(h + down(silu(up(h))))`, then the shared
/// tied vocabulary projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MedusaHead {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub vocab_hash: String,
    pub training_step: u64,
}

/// Weights of the encoder-decoder. The token embedding is shared between
/// source, target, and the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub meta: ParamMeta,
    /// (vocab, d_model)
    pub embedding: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Option<LayerNorm>,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Option<LayerNorm>,
    pub medusa: Vec<MedusaHead>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-bound..bound))
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            weight: self.uniform(fan_in, fan_out, bound),
            bias: Array1::zeros(fan_out),
        }
    }

    fn norm(&mut self, d: usize) -> LayerNorm {
        LayerNorm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            query: self.linear(d, d),
            key: self.linear(d, d),
            value: self.linear(d, d),
            output: self.linear(d, d),
        }
    }

    fn ff(&mut self, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(d, ff),
            down: self.linear(ff, d),
        }
    }
}

impl ModelParameters {
    /// Deterministic initialization: Xavier-uniform weights, zero biases,
    /// unit norm gains, embeddings with standard deviation `d^-1/2`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.d_model;
        let embedding = init.uniform(config.vocab_size, d, (3.0 / d as f64).sqrt());
        let encoder = (0..config.layers_enc)
            .map(|_| EncoderLayer {
                attn_norm: init.norm(d),
                self_attn: init.attention(d),
                ff_norm: init.norm(d),
                ff: init.ff(d, config.d_ff),
            })
            .collect();
        let encoder_norm = (config.layers_enc > 0).then(|| init.norm(d));
        let decoder = (0..config.layers_dec)
            .map(|_| DecoderLayer {
                self_norm: init.norm(d),
                self_attn: init.attention(d),
                cross_norm: init.norm(d),
                cross_attn: init.attention(d),
                ff_norm: init.norm(d),
                ff: init.ff(d, config.d_ff),
            })
            .collect();
        let decoder_norm = (config.layers_dec > 0).then(|| init.norm(d));
        let medusa = (0..config.medusa_heads)
            .map(|_| MedusaHead {
                up: init.linear(d, config.medusa_hidden),
                down: init.linear(config.medusa_hidden, d),
                norm: init.norm(d),
            })
            .collect();
        Self {
            config: config.clone(),
            meta: ParamMeta::default(),
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            medusa,
        }
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// All named tensors, in checkpoint order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        self.walk("", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.walk_mut(&mut out);
        out
    }

    /// Parameters held by the Medusa heads versus everything else, by
    /// walking the allocated tensors.
    pub fn enumerate_counts(&self) -> (usize, usize) {
        self.tensors()
            .iter()
            .fold((0, 0), |(base, medusa), (name, _, data)| {
                if name.starts_with("medusa.") {
                    (base, medusa + data.len())
                } else {
                    (base + data.len(), medusa)
                }
            })
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

/// (name, shape, data) of one tensor.
pub type NamedTensor<'a> = (String, Vec<usize>, &'a [f64]);

trait Walk {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>);
    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);
}

impl Walk for Linear {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push((format!("{prefix}.weight"), self.weight.shape().to_vec(), slice2(&self.weight)));
        out.push((format!("{prefix}.bias"), self.bias.shape().to_vec(), slice1(&self.bias)));
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice2_mut(&mut self.weight));
        out.push(slice1_mut(&mut self.bias));
    }
}

impl Walk for LayerNorm {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push((format!("{prefix}.gain"), self.gain.shape().to_vec(), slice1(&self.gain)));
        out.push((format!("{prefix}.bias"), self.bias.shape().to_vec(), slice1(&self.bias)));
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice1_mut(&mut self.gain));
        out.push(slice1_mut(&mut self.bias));
    }
}

impl Walk for Attention {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.query.walk(&format!("{prefix}.query"), out);
        self.key.walk(&format!("{prefix}.key"), out);
        self.value.walk(&format!("{prefix}.value"), out);
        self.output.walk(&format!("{prefix}.output"), out);
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.query.walk_mut(out);
        self.key.walk_mut(out);
        self.value.walk_mut(out);
        self.output.walk_mut(out);
    }
}

impl Walk for FeedForward {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.up.walk(&format!("{prefix}.up"), out);
        self.down.walk(&format!("{prefix}.down"), out);
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.up.walk_mut(out);
        self.down.walk_mut(out);
    }
}

impl Walk for EncoderLayer {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.attn_norm.walk(&format!("{prefix}.attn_norm"), out);
        self.self_attn.walk(&format!("{prefix}.self_attn"), out);
        self.ff_norm.walk(&format!("{prefix}.ff_norm"), out);
        self.ff.walk(&format!("{prefix}.ff"), out);
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.attn_norm.walk_mut(out);
        self.self_attn.walk_mut(out);
        self.ff_norm.walk_mut(out);
        self.ff.walk_mut(out);
    }
}

impl Walk for DecoderLayer {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.self_norm.walk(&format!("{prefix}.self_norm"), out);
        self.self_attn.walk(&format!("{prefix}.self_attn"), out);
        self.cross_norm.walk(&format!("{prefix}.cross_norm"), out);
        self.cross_attn.walk(&format!("{prefix}.cross_attn"), out);
        self.ff_norm.walk(&format!("{prefix}.ff_norm"), out);
        self.ff.walk(&format!("{prefix}.ff"), out);
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.self_norm.walk_mut(out);
        self.self_attn.walk_mut(out);
        self.cross_norm.walk_mut(out);
        self.cross_attn.walk_mut(out);
        self.ff_norm.walk_mut(out);
        self.ff.walk_mut(out);
    }
}

impl Walk for MedusaHead {
    fn walk<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.up.walk(&format!("{prefix}.up"), out);
        self.down.walk(&format!("{prefix}.down"), out);
        self.norm.walk(&format!("{prefix}.norm"), out);
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.up.walk_mut(out);
        self.down.walk_mut(out);
        self.norm.walk_mut(out);
    }
}

impl Walk for ModelParameters {
    fn walk<'a>(&'a self, _prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(("embedding".into(), self.embedding.shape().to_vec(), slice2(&self.embedding)));
        for (i, l) in self.encoder.iter().enumerate() {
            l.walk(&format!("encoder.{i}"), out);
        }
        if let Some(n) = &self.encoder_norm {
            n.walk("encoder.norm", out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.walk(&format!("decoder.{i}"), out);
        }
        if let Some(n) = &self.decoder_norm {
            n.walk("decoder.norm", out);
        }
        for (i, h) in self.medusa.iter().enumerate() {
            h.walk(&format!("medusa.{i}"), out);
        }
    }

    fn walk_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice2_mut(&mut self.embedding));
        for l in &mut self.encoder {
            l.walk_mut(out);
        }
        if let Some(n) = &mut self.encoder_norm {
            n.walk_mut(out);
        }
        for l in &mut self.decoder {
            l.walk_mut(out);
        }
        if let Some(n) = &mut self.decoder_norm {
            n.walk_mut(out);
        }
        for h in &mut self.medusa {
            h.walk_mut(out);
        }
    }
}

/// Parameter totals from the architecture formula.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub base: usize,
    pub medusa: usize,
    /// Per-component totals, in model order.
    pub breakdown: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.base + self.medusa
    }

    /// Medusa parameters relative to the base transformer.
    pub fn medusa_ratio(&self) -> f64 {
        self.medusa as f64 / self.base as f64
    }
}

/// Closed-form parameter count for a configuration.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let d = config.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let attention = 4 * linear(d, d);
    let ff = linear(d, config.d_ff) + linear(config.d_ff, d);
    let enc_layer = 2 * norm + attention + ff;
    let dec_layer = 3 * norm + 2 * attention + ff;
    let head = linear(d, config.medusa_hidden) + linear(config.medusa_hidden, d) + norm;

    let mut breakdown = vec![("embedding (tied)".to_owned(), config.vocab_size * d)];
    breakdown.push(("encoder layers".to_owned(), config.layers_enc * enc_layer));
    if config.layers_enc > 0 {
        breakdown.push(("encoder final norm".to_owned(), norm));
    }
    breakdown.push(("decoder layers".to_owned(), config.layers_dec * dec_layer));
    if config.layers_dec > 0 {
        breakdown.push(("decoder final norm".to_owned(), norm));
    }
    let base = breakdown.iter().map(|(_, n)| n).sum();
    let medusa = config.medusa_heads * head;
    breakdown.push(("medusa heads".to_owned(), medusa));
    ParamCount { base, medusa, breakdown }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers_enc: 1,
            layers_dec: 1,
            attn_heads: 2,
            d_model: 8,
            d_ff: 16,
            medusa_heads: 0,
            medusa_hidden: 0,
            vocab_size: 10,
            max_len: 16,
            dropout: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn small_config_hand_count() {
        // embedding 10*8 = 80
        // encoder layer: attention 4*(64+8) = 288, ffn 8*16+16 + 16*8+8 = 280, two norms 32 -> 600
        // encoder norm 16
        // decoder layer: attention 576, ffn 280, three norms 48 -> 904
        // decoder norm 16
        let c = count_params(&small());
        assert_eq!(c.base, 80 + 600 + 16 + 904 + 16);
        assert_eq!(c.medusa, 0);
    }

    #[test]
    fn embeddings_only() {
        let mut cfg = small();
        cfg.layers_enc = 0;
        cfg.layers_dec = 0;
        assert_eq!(count_params(&cfg).base, 80);
        assert_eq!(ModelParameters::init(&cfg, 1).enumerate_counts(), (80, 0));
    }

    #[test]
    fn formula_matches_enumeration() {
        for m in [0, 1, 3] {
            let mut cfg = small();
            cfg.medusa_heads = m;
            cfg.medusa_hidden = 5;
            let c = count_params(&cfg);
            assert_eq!(ModelParameters::init(&cfg, 3).enumerate_counts(), (c.base, c.medusa));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy(20);
        let a = ModelParameters::init(&cfg, 7);
        assert_eq!(a, ModelParameters::init(&cfg, 7));
        assert_ne!(a, ModelParameters::init(&cfg, 8));
    }

    #[test]
    fn tensor_names_are_unique() {
        let mut cfg = small();
        cfg.medusa_heads = 2;
        cfg.medusa_hidden = 4;
        let p = ModelParameters::init(&cfg, 0);
        let names: Vec<_> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&"medusa.1.norm.gain".to_owned()));
        assert_eq!(p.clone().tensors_mut().len(), names.len());
    }
}
