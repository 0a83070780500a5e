use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::EncodedPair;
use crate::data::{Dataset, Example};
use crate::error::{contract, Error, Result};
use crate::model::{Model, PREDICT_BATCH};
use crate::smoa::LayerRouting;
use crate::tensor::Graph;

/// Routing of one example through one SMoA layer. Padding positions are
/// excluded; `indices[t]` and `weights[t]` describe token `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub subset: String,
    pub example: String,
    pub layer: usize,
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl RoutingRecord {
    /// How often each adapter appears among the tokens' top-k selections,
    /// optionally weighted by the gate value.
    pub fn counts(&self, n: usize, weighted: bool) -> Vec<f64> {
        let mut c = vec![0.0; n];
        for (idx, w) in self.indices.iter().zip(&self.weights) {
            for (&i, &g) in idx.iter().zip(w) {
                c[i] += if weighted { g } else { 1.0 };
            }
        }
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub n_adapters: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub records: Vec<RoutingRecord>,
}

impl RoutingTrace {
    /// Concatenates another trace recorded from the same model.
    pub fn merge(&mut self, other: RoutingTrace) -> Result<()> {
        if self.records.is_empty() && self.n_layers == 0 {
            *self = other;
            return Ok(());
        }
        if (self.n_adapters, self.top_k, self.n_layers)
            != (other.n_adapters, other.top_k, other.n_layers)
        {
            return Err(contract("cannot merge traces from different SMoA configs"));
        }
        self.records.extend(other.records);
        Ok(())
    }

    /// Subset names in first-appearance order.
    pub fn subsets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.subset) {
                out.push(r.subset.clone());
            }
        }
        out
    }

    pub fn last_layer(&self) -> usize {
        self.n_layers.saturating_sub(1)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the model over `dataset` in inference mode and records every SMoA
/// layer's per-token top-k choice. The subset label is the dataset name.
pub fn record_routing(model: &Model, dataset: &Dataset) -> Result<RoutingTrace> {
    let Some(stack) = &model.smoa else {
        return Err(contract("routing needs a model with SMoA layers"));
    };
    let n_layers = stack.layers.len();
    let mut trace = RoutingTrace {
        n_adapters: stack.config.n_adapters,
        top_k: stack.config.top_k,
        n_layers,
        records: Vec::with_capacity(dataset.len() * n_layers),
    };
    for chunk in dataset.examples.chunks(PREDICT_BATCH) {
        let pairs: Vec<EncodedPair> = chunk.iter().map(Example::encode).collect();
        let batch = model.encode_batch(&pairs)?;
        let mut routing: Vec<LayerRouting> = Vec::new();
        let mut g = Graph::inference();
        model.forward_with(&mut g, &batch, true, Some(&mut routing))?;
        for (b, ex) in chunk.iter().enumerate() {
            for (layer, lr) in routing.iter().enumerate() {
                let mut indices = Vec::new();
                let mut weights = Vec::new();
                for t in 0..batch.seq {
                    let row = b * batch.seq + t;
                    if batch.mask[row] {
                        indices.push(lr.indices[row].clone());
                        weights.push(lr.weights[row].clone());
                    }
                }
                trace.records.push(RoutingRecord {
                    subset: dataset.name.clone(),
                    example: ex.id.clone(),
                    layer,
                    indices,
                    weights,
                });
            }
        }
    }
    Ok(trace)
}

/// Normalized frequency of each adapter in the top-k selections of
/// `subset`'s tokens at `layer`.
pub fn routing_distribution(
    trace: &RoutingTrace,
    layer: usize,
    subset: &str,
    weighted: bool,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; trace.n_adapters];
    let mut seen = false;
    for r in trace.records.iter().filter(|r| r.layer == layer && r.subset == subset) {
        seen = true;
        for (t, c) in total.iter_mut().zip(r.counts(trace.n_adapters, weighted)) {
            *t += c;
        }
    }
    let sum: f64 = total.iter().sum();
    if !seen || sum == 0.0 {
        return Err(contract(format!("no routing records for subset {subset} at layer {layer}")));
    }
    Ok(total.into_iter().map(|c| c / sum).collect())
}

/// Pearson product-moment correlation.
pub fn pearson_corr(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() < 2 {
        return Err(contract(format!(
            "pearson needs two vectors of equal length >= 2, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(p) || constant(q) {
        return Err(Error::UndefinedCorrelation);
    }
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in p.iter().zip(q) {
        sxy += (x - mp) * (y - mq);
        sxx += (x - mp) * (x - mp);
        syy += (y - mq) * (y - mq);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-subset distributions at one layer and their pairwise correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingAnalysis {
    pub layer: usize,
    pub weighted: bool,
    pub subsets: Vec<String>,
    pub distributions: Vec<Vec<f64>>,
    /// `None` where a distribution is constant.
    pub correlations: Vec<Vec<Option<f64>>>,
}

impl RoutingAnalysis {
    pub fn new(trace: &RoutingTrace, layer: usize, subsets: &[String], weighted: bool) -> Result<Self> {
        let distributions = subsets
            .iter()
            .map(|s| routing_distribution(trace, layer, s, weighted))
            .collect::<Result<Vec<_>>>()?;
        let k = subsets.len();
        let mut correlations = vec![vec![None; k]; k];
        for i in 0..k {
            for j in i..k {
                let r = match pearson_corr(&distributions[i], &distributions[j]) {
                    Ok(r) => Some(r),
                    Err(Error::UndefinedCorrelation) => None,
                    Err(e) => return Err(e),
                };
                let r = if i == j { r.map(|_| 1.0) } else { r };
                correlations[i][j] = r;
                correlations[j][i] = r;
            }
        }
        Ok(RoutingAnalysis {
            layer,
            weighted,
            subsets: subsets.to_vec(),
            distributions,
            correlations,
        })
    }

    pub fn corr(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.subsets.iter().position(|s| s == a)?;
        let j = self.subsets.iter().position(|s| s == b)?;
        self.correlations[i][j]
    }

    /// Mean off-diagonal correlation within and across the groups given by
    /// `family`. Undefined correlations are skipped.
    pub fn family_contrast(&self, family: impl Fn(&str) -> String) -> FamilyContrast {
        let fam: Vec<String> = self.subsets.iter().map(|s| family(s)).collect();
        let (mut within, mut cross) = (Vec::new(), Vec::new());
        for i in 0..self.subsets.len() {
            for j in i + 1..self.subsets.len() {
                if let Some(r) = self.correlations[i][j] {
                    if fam[i] == fam[j] {
                        within.push(r);
                    } else {
                        cross.push(r);
                    }
                }
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        FamilyContrast {
            within_pairs: within.len(),
            cross_pairs: cross.len(),
            within_mean: mean(&within),
            cross_mean: mean(&cross),
        }
    }

    pub fn distributions_csv(&self) -> String {
        let mut s = String::from("subset");
        for i in 0..self.distributions.first().map_or(0, Vec::len) {
            let _ = write!(s, ",adapter_{i}");
        }
        s.push('\n');
        for (name, d) in self.subsets.iter().zip(&self.distributions) {
            s.push_str(name);
            for v in d {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn correlations_csv(&self) -> String {
        let mut s = String::from("subset");
        for name in &self.subsets {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for (name, row) in self.subsets.iter().zip(&self.correlations) {
            s.push_str(name);
            for v in row {
                match v {
                    Some(r) => {
                        let _ = write!(s, ",{r}");
                    }
                    None => s.push_str(",nan"),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyContrast {
    pub within_pairs: usize,
    pub cross_pairs: usize,
    pub within_mean: Option<f64>,
    pub cross_mean: Option<f64>,
}

impl FamilyContrast {
    pub fn specialized(&self) -> bool {
        matches!((self.within_mean, self.cross_mean), (Some(w), Some(c)) if w > c)
    }
}

/// Subset-name grouping used for challenge variants, e.g. `LX_A` → `LX`.
pub fn name_prefix(subset: &str) -> String {
    subset.split('_').next().unwrap_or(subset).to_string()
}

pub fn counts_by_subset(trace: &RoutingTrace) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in trace.records.iter().filter(|r| r.layer == 0) {
        *out.entry(r.subset.clone()).or_insert(0) += 1;
    }
    out
}
