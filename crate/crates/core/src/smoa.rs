//! Sparse mixture of adapters: top-k gated bottleneck sub-adapters added
//! residually after the sublayers of a frozen encoder.
//!
//! A layer holds `n` sub-adapters and a bias-free linear gate. For an input
//! row `x` the gate scores `x W_g`, keeps the `k` largest scores, and
//! softmaxes them (the rest become exact zeros). The layer output is
//! `x + sum_i G(x)_i a_i(x)`, evaluated only for the `k` selected adapters.
//! Routing is per token position.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Linear, INIT_STD};
use crate::error::{config, contract, Result};
use crate::tensor::{gelu_scalar, softmax_in_place, Graph, Parameter, Tensor, Var};

/// Indices of the `k` largest entries of `v`, ascending by index.
/// Equal values are ranked by lower index first.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(contract(format!(
            "top-k needs 1 <= k <= n, got k={k}, n={}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // total_cmp keeps NaN from scrambling the order; inputs are finite anyway.
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Keeps the top-`k` entries verbatim and replaces the rest with `-inf`.
pub fn top_k_mask(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let kept = top_k_indices(v, k)?;
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for i in kept {
        out[i] = v[i];
    }
    Ok(out)
}

/// `(n, k)` for `m` adversarial datasets: `n = 2m - 1`, `k = min(2, n)`.
pub fn default_expert_config(m: usize) -> Result<(usize, usize)> {
    if m < 1 {
        return Err(contract("need at least one adversarial dataset"));
    }
    let n = 2 * m - 1;
    Ok((n, n.min(2)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoaConfig {
    pub n_adapters: usize,
    pub top_k: usize,
    pub bottleneck: usize,
}

impl SmoaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_adapters < 1 || self.top_k < 1 || self.top_k > self.n_adapters {
            return Err(config(format!(
                "need n >= k >= 1, got n={} k={}",
                self.n_adapters, self.top_k
            )));
        }
        if self.bottleneck < 1 {
            return Err(config("adapter bottleneck must be positive"));
        }
        Ok(())
    }

    /// Trainable parameters of one layer at width `d_model`.
    pub fn params_per_layer(&self, d_model: usize) -> usize {
        let (n, db) = (self.n_adapters, self.bottleneck);
        n * (2 * d_model * db + db + d_model) + d_model * n
    }
}

/// Total SMoA parameters for a stack over `n_layers` encoder blocks.
pub fn smoa_param_formula(d_model: usize, bottleneck: usize, n: usize, n_layers: usize) -> usize {
    let per = n * (2 * d_model * bottleneck + bottleneck + d_model) + d_model * n;
    per * 2 * n_layers
}

#[derive(Clone, Debug)]
pub struct SparseGate {
    /// `[d_model, n]`.
    pub w_g: Parameter,
    pub k: usize,
}

impl SparseGate {
    pub fn n(&self) -> usize {
        self.w_g.value.shape()[1]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let w = self.w_g.value.data();
        let mut out = vec![0.0; n];
        for (i, &xi) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *o += xi * wv;
            }
        }
        out
    }

    /// Mixture weights for one input row: exactly `k` positive entries
    /// summing to one.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut w = top_k_mask(&self.logits(x), self.k)?;
        softmax_in_place(&mut w)?;
        Ok(w)
    }
}

/// Bottleneck adapter `up(gelu(down(x)))` with no internal residual.
#[derive(Clone, Debug)]
pub struct SubAdapter {
    /// `[d_model, bottleneck]` weight and `[bottleneck]` bias.
    pub down: Linear,
    /// `[bottleneck, d_model]` weight and `[d_model]` bias; zero at init.
    pub up: Linear,
}

impl SubAdapter {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .down
            .apply_row(x)
            .into_iter()
            .map(gelu_scalar)
            .collect();
        self.up.apply_row(&hidden)
    }

    fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.gelu(h)?;
        self.up.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct SmoaLayer {
    pub gate: SparseGate,
    pub adapters: Vec<SubAdapter>,
}

/// Per-row routing decisions of one layer for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerRouting {
    /// Selected adapter indices for each input row, ascending.
    pub indices: Vec<Vec<usize>>,
    /// Gate weights matching `indices`.
    pub weights: Vec<Vec<f64>>,
}

impl SmoaLayer {
    pub fn new<R: Rng>(
        prefix: &str,
        d_model: usize,
        cfg: &SmoaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        };
        let gate = SparseGate {
            w_g: Parameter::new(format!("{prefix}.gate"), randn(&[d_model, cfg.n_adapters])?),
            k: cfg.top_k,
        };
        let mut adapters = Vec::with_capacity(cfg.n_adapters);
        for i in 0..cfg.n_adapters {
            let down = Linear {
                weight: Parameter::new(
                    format!("{prefix}.adapter.{i}.down.weight"),
                    randn(&[d_model, cfg.bottleneck])?,
                ),
                bias: Parameter::new(
                    format!("{prefix}.adapter.{i}.down.bias"),
                    Tensor::zeros(&[cfg.bottleneck]),
                ),
            };
            let up = Linear {
                weight: Parameter::new(
                    format!("{prefix}.adapter.{i}.up.weight"),
                    Tensor::zeros(&[cfg.bottleneck, d_model]),
                ),
                bias: Parameter::new(
                    format!("{prefix}.adapter.{i}.up.bias"),
                    Tensor::zeros(&[d_model]),
                ),
            };
            adapters.push(SubAdapter { down, up });
        }
        Ok(SmoaLayer { gate, adapters })
    }

    pub fn n(&self) -> usize {
        self.adapters.len()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.gate.w_g];
        for a in &self.adapters {
            out.extend([&a.down.weight, &a.down.bias, &a.up.weight, &a.up.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.gate.w_g];
        for a in &mut self.adapters {
            out.extend([
                &mut a.down.weight,
                &mut a.down.bias,
                &mut a.up.weight,
                &mut a.up.bias,
            ]);
        }
        out
    }

    /// `x + sum_i G(x)_i a_i(x)` for one row, evaluating only the selected
    /// adapters.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let weights = self.gate.forward(x)?;
        let mut out = x.to_vec();
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.adapters[i].forward(x)) {
                *o += w * d;
            }
        }
        Ok(out)
    }

    /// Batched, differentiable version of [`SmoaLayer::forward`] over the rows
    /// of `x` (`[rows, d_model]`).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        routing: Option<&mut LayerRouting>,
    ) -> Result<Var> {
        let n = self.n();
        let w_g = g.param(&self.gate.w_g);
        let logits = g.matmul(x, w_g)?;
        let masked = g.top_k_mask(logits, self.gate.k)?;
        let gates = g.softmax(masked, 1)?;

        let rows = g.value(x).rows();
        let mut selected: Vec<Vec<usize>> = vec![Vec::new(); n];
        {
            let m = g.value(masked).data();
            for r in 0..rows {
                for (i, sel) in selected.iter_mut().enumerate() {
                    if m[r * n + i] != f64::NEG_INFINITY {
                        sel.push(r);
                    }
                }
            }
        }
        if let Some(trace) = routing {
            let m = g.value(masked).data();
            let w = g.value(gates).data();
            trace.indices.clear();
            trace.weights.clear();
            for r in 0..rows {
                let idx: Vec<usize> = (0..n)
                    .filter(|&i| m[r * n + i] != f64::NEG_INFINITY)
                    .collect();
                trace.weights.push(idx.iter().map(|&i| w[r * n + i]).collect());
                trace.indices.push(idx);
            }
        }

        let mut parts = Vec::new();
        for (i, rows_i) in selected.into_iter().enumerate() {
            if rows_i.is_empty() {
                continue;
            }
            let xi = g.gather_rows(x, &rows_i)?;
            let delta = self.adapters[i].forward_graph(g, xi)?;
            let wi = g.gather_entries(gates, &rows_i, i)?;
            let part = g.mul_rows(delta, wi)?;
            parts.push((part, rows_i));
        }
        g.scatter_add(x, parts)
    }
}

/// SMoA layers for an encoder: one after each attention sublayer and one
/// after each feed-forward sublayer, in that order per block.
#[derive(Clone, Debug)]
pub struct SmoaStack {
    pub config: SmoaConfig,
    pub layers: Vec<SmoaLayer>,
}

impl SmoaStack {
    pub fn new<R: Rng>(d_model: usize, n_blocks: usize, cfg: SmoaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(2 * n_blocks);
        for block in 0..n_blocks {
            for site in ["attention", "ffn"] {
                layers.push(SmoaLayer::new(
                    &format!("smoa.{block}.{site}"),
                    d_model,
                    &cfg,
                    rng,
                )?);
            }
        }
        Ok(SmoaStack { config: cfg, layers })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
