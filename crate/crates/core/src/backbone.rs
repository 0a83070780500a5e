//! Post-norm transformer encoder for sequence-pair classification.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::tensor::{Graph, Parameter, Tensor, Var};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(config("need at least two classes"));
        }
        if self.max_len < 4 {
            return Err(config("max_len must be at least 4"));
        }
        if self.vocab_size <= SEP as usize || self.d_model < 2 || self.d_ff == 0 {
            return Err(config("vocab, d_model and d_ff must be positive and non-trivial"));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`Backbone`].
    pub fn param_count(&self) -> usize {
        let (v, d, f, c) = (self.vocab_size, self.d_model, self.d_ff, self.n_classes);
        let embeddings = v * d + self.max_len * d + 2 * d + 2 * d;
        let block = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
        embeddings + self.n_layers * block + d * c + c
    }
}

/// `[CLS] a [SEP] b [SEP]` with segment ids and an attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask: Vec<bool>,
}

impl EncodedPair {
    pub fn new(a: &[u32], b: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
        tokens.push(CLS);
        tokens.extend_from_slice(a);
        tokens.push(SEP);
        let seg_a = tokens.len();
        tokens.extend_from_slice(b);
        tokens.push(SEP);
        let mut segments = vec![0u8; tokens.len()];
        for s in &mut segments[seg_a..] {
            *s = 1;
        }
        let mask = vec![true; tokens.len()];
        EncodedPair {
            tokens,
            segments,
            mask,
        }
    }

    /// Hypothesis-only view: segment A is dropped, leaving `[CLS] [SEP] b [SEP]`.
    pub fn partial_input(b: &[u32]) -> Self {
        Self::new(&[], b)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A padded batch laid out as `[batch * seq]` rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub size: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(pairs: &[EncodedPair], max_len: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq = pairs.iter().map(|p| p.len()).max().unwrap_or(0);
        if seq > max_len {
            return Err(Error::Input(format!(
                "sequence of length {seq} exceeds max_len {max_len}"
            )));
        }
        let n = pairs.len() * seq;
        let mut batch = Batch {
            tokens: Vec::with_capacity(n),
            segments: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            size: pairs.len(),
            seq,
        };
        for p in pairs {
            for t in 0..seq {
                let live = t < p.len();
                batch.tokens.push(if live { p.tokens[t] as usize } else { PAD as usize });
                batch
                    .segments
                    .push(if live { p.segments[t] as usize } else { 0 });
                batch.positions.push(t);
                batch.mask.push(live && p.mask[t]);
            }
        }
        Ok(batch)
    }

    /// Row index of each sequence's CLS token.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size).map(|b| b * self.seq).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`.
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub(crate) fn init<R: Rng>(name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), randn(&[inp, out], rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// `x W + b` for a single row.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let out_dim = self.weight.value.shape()[1];
        let w = self.weight.value.data();
        let mut y = self.bias.value.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, wv) in y.iter_mut().zip(&w[i * out_dim..(i + 1) * out_dim]) {
                *o += xi * wv;
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNorm {
    fn init(name: &str, d: usize) -> Self {
        LayerNorm {
            gain: Parameter::new(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
}

impl EncoderBlock {
    fn params(&self) -> [&Parameter; 16] {
        [
            &self.query.weight,
            &self.query.bias,
            &self.key.weight,
            &self.key.bias,
            &self.value.weight,
            &self.value.bias,
            &self.output.weight,
            &self.output.bias,
            &self.attn_norm.gain,
            &self.attn_norm.bias,
            &self.ff_in.weight,
            &self.ff_in.bias,
            &self.ff_out.weight,
            &self.ff_out.bias,
            &self.ff_norm.gain,
            &self.ff_norm.bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 16] {
        [
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.output.weight,
            &mut self.output.bias,
            &mut self.attn_norm.gain,
            &mut self.attn_norm.bias,
            &mut self.ff_in.weight,
            &mut self.ff_in.bias,
            &mut self.ff_out.weight,
            &mut self.ff_out.bias,
            &mut self.ff_norm.gain,
            &mut self.ff_norm.bias,
        ]
    }

    /// Self-attention, residual add and norm.
    pub(crate) fn attention_sublayer(&self, g: &mut Graph, x: Var, batch: &Batch, heads: usize) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, &batch.mask, batch.size, batch.seq, heads)?;
        let o = self.output.forward(g, a)?;
        let r = g.add(x, o)?;
        self.attn_norm.forward(g, r)
    }

    /// Feed-forward, residual add and norm.
    pub(crate) fn ffn_sublayer(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ff_in.forward(g, x)?;
        let h = g.gelu(h)?;
        let f = self.ff_out.forward(g, h)?;
        let r = g.add(x, f)?;
        self.ff_norm.forward(g, r)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub token_emb: Parameter,
    pub position_emb: Parameter,
    pub segment_emb: Parameter,
    pub emb_norm: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub classifier: Linear,
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches sample count")
}

impl Backbone {
    /// Seeded initialization: weights and embeddings ~ N(0, 0.02), biases
    /// zero, norm gains one.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let token_emb = Parameter::new("embeddings.token", randn(&[config.vocab_size, d], &mut rng));
        let position_emb = Parameter::new("embeddings.position", randn(&[config.max_len, d], &mut rng));
        let segment_emb = Parameter::new("embeddings.segment", randn(&[2, d], &mut rng));
        let emb_norm = LayerNorm::init("embeddings.norm", d);
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderBlock {
                    query: Linear::init(&format!("{p}.attention.query"), d, d, &mut rng),
                    key: Linear::init(&format!("{p}.attention.key"), d, d, &mut rng),
                    value: Linear::init(&format!("{p}.attention.value"), d, d, &mut rng),
                    output: Linear::init(&format!("{p}.attention.output"), d, d, &mut rng),
                    attn_norm: LayerNorm::init(&format!("{p}.attention.norm"), d),
                    ff_in: Linear::init(&format!("{p}.ffn.in"), d, f, &mut rng),
                    ff_out: Linear::init(&format!("{p}.ffn.out"), f, d, &mut rng),
                    ff_norm: LayerNorm::init(&format!("{p}.ffn.norm"), d),
                }
            })
            .collect();
        let classifier = Linear::init("classifier", d, config.n_classes, &mut rng);
        Ok(Backbone {
            config,
            token_emb,
            position_emb,
            segment_emb,
            emb_norm,
            blocks,
            classifier,
        })
    }

    /// Every parameter in canonical order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![
            &self.token_emb,
            &self.position_emb,
            &self.segment_emb,
            &self.emb_norm.gain,
            &self.emb_norm.bias,
        ];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.classifier.weight, &self.classifier.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.position_emb,
            &mut self.segment_emb,
            &mut self.emb_norm.gain,
            &mut self.emb_norm.bias,
        ];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        out
    }

    pub(crate) fn embed(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        if batch.seq > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds max_len {}",
                batch.seq, self.config.max_len
            )));
        }
        let tok = g.param(&self.token_emb);
        let pos = g.param(&self.position_emb);
        let seg = g.param(&self.segment_emb);
        let t = g.embedding(tok, &batch.tokens)?;
        let p = g.embedding(pos, &batch.positions)?;
        let s = g.embedding(seg, &batch.segments)?;
        let e = g.add(t, p)?;
        let e = g.add(e, s)?;
        self.emb_norm.forward(g, e)
    }

    pub(crate) fn classify(&self, g: &mut Graph, hidden: Var, batch: &Batch) -> Result<Var> {
        let cls = g.gather_rows(hidden, &batch.cls_rows())?;
        self.classifier.forward(g, cls)
    }
}
