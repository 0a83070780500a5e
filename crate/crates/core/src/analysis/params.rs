use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Batch;
use crate::error::{contract, Result};
use crate::model::Model;
use crate::smoa::smoa_param_formula;
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NamespaceCount {
    pub total: usize,
    pub trainable: usize,
}

/// Mean and median seconds per forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTiming {
    pub batches: usize,
    pub with_smoa_mean: f64,
    pub with_smoa_median: f64,
    pub without_smoa_mean: f64,
    pub without_smoa_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
    /// Keyed by the first component of the parameter name.
    pub namespaces: BTreeMap<String, NamespaceCount>,
    /// Closed-form SMoA parameter count, when SMoA layers are present.
    pub smoa_formula: Option<usize>,
    pub timing: Option<ForwardTiming>,
}

/// Counts parameters by enumeration and cross-checks the SMoA total against
/// the closed form.
pub fn param_report(model: &Model) -> Result<ParamReport> {
    let mut namespaces: BTreeMap<String, NamespaceCount> = BTreeMap::new();
    for p in model.params() {
        let ns = p.name.split('.').next().unwrap_or("").to_string();
        let e = namespaces.entry(ns).or_default();
        e.total += p.numel();
        if p.requires_grad {
            e.trainable += p.numel();
        }
    }
    let total = model.total_params();
    let trainable = model.trainable_params();
    let smoa_formula = model.smoa.as_ref().map(|s| {
        let c = model.config();
        smoa_param_formula(c.d_model, s.config.bottleneck, s.config.n_adapters, c.n_layers)
    });
    if let Some(f) = smoa_formula {
        let counted = namespaces.get("smoa").map_or(0, |n| n.total);
        if counted != f {
            return Err(contract(format!(
                "enumerated {counted} SMoA parameters, closed form gives {f}"
            )));
        }
    }
    Ok(ParamReport {
        total,
        trainable,
        ratio: trainable as f64 / total as f64,
        namespaces,
        smoa_formula,
        timing: None,
    })
}

fn mean_median(mut v: Vec<f64>) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    };
    (mean, median)
}

/// Times inference forward passes over `batches` with and without the SMoA
/// layers, after one warmup pass of each.
pub fn measure_forward_time(model: &Model, batches: &[Batch]) -> Result<ForwardTiming> {
    if model.smoa.is_none() {
        return Err(contract("timing comparison needs SMoA layers"));
    }
    if batches.is_empty() {
        return Err(contract("no batches to time"));
    }
    let run = |use_smoa: bool| -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        model.forward_with(&mut g, &batches[0], use_smoa, None)?;
        let mut times = Vec::with_capacity(batches.len());
        for b in batches {
            let t = Instant::now();
            let mut g = Graph::inference();
            model.forward_with(&mut g, b, use_smoa, None)?;
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(times)
    };
    let (wm, wmed) = mean_median(run(true)?);
    let (pm, pmed) = mean_median(run(false)?);
    Ok(ForwardTiming {
        batches: batches.len(),
        with_smoa_mean: wm,
        with_smoa_median: wmed,
        without_smoa_mean: pm,
        without_smoa_median: pmed,
    })
}

/// Closed-form accounting for a BERT-style encoder with learned positions,
/// a pooler and a linear classifier, plus SMoA layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_classes: usize,
}

impl EncoderDims {
    pub const ROBERTA_BASE: EncoderDims = EncoderDims {
        vocab: 50265,
        max_positions: 514,
        type_vocab: 1,
        d_model: 768,
        d_ff: 3072,
        n_layers: 12,
        n_classes: 3,
    };

    pub fn backbone_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let embeddings = (self.vocab + self.max_positions + self.type_vocab) * d + 2 * d;
        let block = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
        let pooler = d * d + d;
        let head = d * self.n_classes + self.n_classes;
        embeddings + self.n_layers * block + pooler + head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub bottleneck: usize,
    pub n_adapters: usize,
    pub backbone: usize,
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

pub fn scale_report(dims: &EncoderDims, n_adapters: usize, bottleneck: usize) -> ScaleReport {
    let backbone = dims.backbone_params();
    let trainable = smoa_param_formula(dims.d_model, bottleneck, n_adapters, dims.n_layers);
    let total = backbone + trainable;
    ScaleReport {
        bottleneck,
        n_adapters,
        backbone,
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    }
}
