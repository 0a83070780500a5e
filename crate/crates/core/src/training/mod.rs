//! Optimization protocols: full fine-tuning, frozen-backbone SMoA training
//! under a summed per-dataset loss, and the two-stage / one-stage strategies.

mod optim;

pub use optim::{adamw_step, linear_lr, AdamHyper, AdamState};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Batch, EncodedPair};
use crate::data::{Dataset, Example};
use crate::error::{config, contract, Result};
use crate::model::{Classifier, Model};
use crate::smoa::{default_expert_config, SmoaConfig};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TwoStage,
    OneStage,
}

/// How one-stage training combines the basic and adversarial sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// One batch from every dataset per step, losses summed.
    PerDataset,
    /// All datasets concatenated and shuffled into a single stream.
    Concat,
}

/// Which part of each pair the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Full,
    /// Segment B only, for hypothesis-only probes.
    PartialInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate for SMoA training.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub strategy: Strategy,
    pub seed: u64,
    /// Tune the classifier head alongside the SMoA layers.
    pub train_head: bool,
    pub mixing: Mixing,
    /// Learning rate and epochs for full fine-tuning of the backbone.
    pub backbone_learning_rate: f64,
    pub backbone_epochs: usize,
    /// Whether one-stage training also tunes the backbone.
    pub one_stage_tune_backbone: bool,
    /// `None` picks `n = 2m - 1`, `k = 2` from the number of adversarial sets.
    pub smoa: Option<SmoaConfig>,
    pub bottleneck: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            epochs: 5,
            batch_size: 32,
            adam: AdamHyper::default(),
            strategy: Strategy::TwoStage,
            seed: 0,
            train_head: false,
            mixing: Mixing::PerDataset,
            backbone_learning_rate: 3e-4,
            backbone_epochs: 5,
            one_stage_tune_backbone: true,
            smoa: None,
            bottleneck: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.backbone_learning_rate > 0.0) {
            return Err(config("learning rates must be positive"));
        }
        if self.epochs < 1 || self.backbone_epochs < 1 {
            return Err(config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(config("batch_size must be positive"));
        }
        Ok(())
    }

    /// The SMoA shape used for `m` adversarial datasets.
    pub fn smoa_for(&self, m: usize) -> Result<SmoaConfig> {
        if let Some(c) = self.smoa {
            c.validate()?;
            return Ok(c);
        }
        let (n, k) = default_expert_config(m)?;
        Ok(SmoaConfig {
            n_adapters: n,
            top_k: k,
            bottleneck: self.bottleneck,
        })
    }
}

/// Optimization settings for one call to [`fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean batch loss per dataset over the epoch.
    pub loss: BTreeMap<String, f64>,
    pub lr_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub datasets: Vec<String>,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub accuracy: BTreeMap<String, f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    #[serde(default)]
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

impl ParamSummary {
    pub fn of(model: &Model) -> Self {
        let (total, trainable) = (model.total_params(), model.trainable_params());
        ParamSummary {
            total,
            trainable,
            ratio: trainable as f64 / total as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub train_head: bool,
    pub smoa: Option<SmoaConfig>,
    pub phases: Vec<PhaseReport>,
    pub params: ParamSummary,
    pub backbone_hash_before: Option<String>,
    pub backbone_hash_after: Option<String>,
    #[serde(default)]
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn backbone_unchanged(&self) -> bool {
        self.backbone_hash_before.is_some() && self.backbone_hash_before == self.backbone_hash_after
    }

    /// The report with every wall-clock field zeroed, for reproducible output.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        for p in &mut r.phases {
            p.wall_time_secs = 0.0;
        }
        r
    }

    pub fn final_accuracy(&self) -> Option<&BTreeMap<String, f64>> {
        self.phases.last().map(|p| &p.accuracy)
    }

    /// Per-epoch metrics as CSV: `phase,epoch,dataset,loss,lr_end`.
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "phase,epoch,dataset,loss,lr_end")?;
        for p in &self.phases {
            for e in &p.epochs {
                for (name, loss) in &e.loss {
                    writeln!(w, "{},{},{},{:.10},{:.10e}", p.name, e.epoch, name, loss, e.lr_end)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Encoded pairs and labels ready for batching.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub name: String,
    pub pairs: Vec<EncodedPair>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(ds: &Dataset, view: View) -> Self {
        let pairs = ds
            .examples
            .iter()
            .map(|e| match view {
                View::Full => e.encode(),
                View::PartialInput => e.encode_partial(),
            })
            .collect();
        Prepared {
            name: ds.name.clone(),
            pairs,
            labels: ds.examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize], max_len: usize) -> Result<LabeledBatch> {
        let pairs: Vec<EncodedPair> = idx.iter().map(|&i| self.pairs[i].clone()).collect();
        Ok(LabeledBatch {
            batch: Batch::new(&pairs, max_len)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub batch: Batch,
    pub labels: Vec<usize>,
}

/// Walks a dataset in shuffled order, reshuffling after each pass. A pass
/// ends with a short batch when the size does not divide evenly.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cursor { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

pub struct MultiBiasLoss {
    pub total: Var,
    pub terms: Vec<Var>,
}

/// Sum over datasets of the batch-mean cross-entropy, one batch per dataset.
pub fn multi_bias_loss(model: &Model, g: &mut Graph, batches: &[LabeledBatch]) -> Result<MultiBiasLoss> {
    if batches.is_empty() {
        return Err(contract("multi-bias loss needs at least one batch"));
    }
    let mut terms = Vec::with_capacity(batches.len());
    for b in batches {
        if b.labels.is_empty() {
            return Err(contract("empty batch in multi-bias loss"));
        }
        let logits = model.forward(g, &b.batch)?;
        terms.push(g.cross_entropy(logits, &b.labels)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(MultiBiasLoss { total, terms })
}

/// Gradient of the summed loss accumulated into the model's parameters.
/// Returns the per-dataset loss values.
pub fn accumulate_gradients(model: &mut Model, batches: &[LabeledBatch]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let loss = multi_bias_loss(model, &mut g, batches)?;
    g.backward(loss.total)?;
    g.accumulate_into(model.params_mut());
    Ok(loss.terms.iter().map(|&t| g.value(t).item()).collect())
}

/// Trains the model's currently trainable parameters. Every step draws one
/// batch per dataset; an epoch is as many steps as the largest dataset needs,
/// smaller datasets cycle.
pub fn fit(model: &mut Model, datasets: &[Prepared], phase: &Phase) -> Result<Vec<EpochRecord>> {
    if datasets.is_empty() {
        return Err(config("no datasets to train on"));
    }
    for d in datasets {
        if d.len() < phase.batch_size {
            return Err(config(format!(
                "dataset {} has {} examples, fewer than one batch of {}",
                d.name,
                d.len(),
                phase.batch_size
            )));
        }
    }
    let max_len = model.config().max_len;
    let steps_per_epoch = datasets
        .iter()
        .map(|d| d.len().div_ceil(phase.batch_size))
        .max()
        .unwrap_or(0);
    let total = steps_per_epoch * phase.epochs;
    let mut cursors: Vec<Cursor> = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| Cursor::new(d.len(), phase.seed.wrapping_add(i as u64 * 0x9E37_79B9)))
        .collect();
    let mut state = AdamState::new();
    let mut step = 0usize;
    let mut records = Vec::with_capacity(phase.epochs);
    for epoch in 1..=phase.epochs {
        let mut sums = vec![0.0; datasets.len()];
        let mut lr = phase.learning_rate;
        for _ in 0..steps_per_epoch {
            let batches = datasets
                .iter()
                .zip(&mut cursors)
                .map(|(d, c)| d.batch(&c.next(phase.batch_size), max_len))
                .collect::<Result<Vec<_>>>()?;
            model.zero_grad();
            let losses = accumulate_gradients(model, &batches)?;
            lr = linear_lr(step, total, phase.learning_rate);
            step += 1;
            adamw_step(model.params_mut(), &mut state, &phase.adam, step as u64, lr)?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l;
            }
        }
        model.zero_grad();
        let loss: BTreeMap<String, f64> = datasets
            .iter()
            .zip(&sums)
            .map(|(d, s)| (d.name.clone(), s / steps_per_epoch as f64))
            .collect();
        log::info!("epoch {epoch}/{}: loss {loss:?}", phase.epochs);
        records.push(EpochRecord {
            epoch,
            steps: steps_per_epoch,
            loss,
            lr_end: lr,
        });
    }
    Ok(records)
}

/// Argmax accuracy; ties go to the lowest class index.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let preds = model.predict(&dataset.examples)?;
    let hits = preds
        .iter()
        .zip(&dataset.examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// `matrix[true][predicted]` counts.
pub fn confusion<C: Classifier + ?Sized>(model: &C, dataset: &Dataset, n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let preds = model.predict(&dataset.examples)?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (p, e) in preds.iter().zip(&dataset.examples) {
        m[e.label][*p] += 1;
    }
    Ok(m)
}

pub fn evaluate_all<C: Classifier + ?Sized>(model: &C, splits: &[Dataset]) -> Result<BTreeMap<String, f64>> {
    splits
        .iter()
        .map(|d| Ok((d.name.clone(), evaluate(model, d)?)))
        .collect()
}

fn phase_report(
    name: &str,
    model: &Model,
    datasets: &[Prepared],
    epochs: Vec<EpochRecord>,
    eval: &[Dataset],
    started: Instant,
) -> Result<PhaseReport> {
    Ok(PhaseReport {
        name: name.into(),
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        steps: epochs.iter().map(|e| e.steps).sum(),
        epochs,
        accuracy: evaluate_all(model, eval)?,
        trainable_params: model.trainable_params(),
        total_params: model.total_params(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Full fine-tuning of every parameter on one dataset.
pub fn train_full(model: &mut Model, dataset: &Dataset, view: View, cfg: &TrainConfig, eval: &[Dataset]) -> Result<PhaseReport> {
    cfg.validate()?;
    let started = Instant::now();
    model.unfreeze_all();
    let data = [Prepared::new(dataset, view)];
    let phase = Phase {
        learning_rate: cfg.backbone_learning_rate,
        epochs: cfg.backbone_epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam,
        seed: cfg.seed,
    };
    let epochs = fit(model, &data, &phase)?;
    phase_report("full", model, &data, epochs, eval, started)
}

/// Inserts SMoA layers into a tuned backbone, freezes it, and trains on the
/// adversarial datasets under the summed loss.
pub fn train_smoa(model: Model, adversarial: &[Dataset], cfg: &TrainConfig, eval: &[Dataset]) -> Result<(Model, PhaseReport, String, String)> {
    cfg.validate()?;
    let started = Instant::now();
    let smoa = cfg.smoa_for(adversarial.len())?;
    let mut model = model.insert_smoa(smoa, cfg.seed ^ 0x5EED_5A0A)?;
    model.freeze_backbone(cfg.train_head)?;
    let before = model.backbone_hash();
    let data: Vec<Prepared> = adversarial.iter().map(|d| Prepared::new(d, View::Full)).collect();
    let phase = Phase {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam,
        seed: cfg.seed.wrapping_add(1),
    };
    let epochs = fit(&mut model, &data, &phase)?;
    let after = model.backbone_hash();
    let report = phase_report("smoa", &model, &data, epochs, eval, started)?;
    Ok((model, report, before, after))
}

/// The basic dataset and the adversarial datasets of one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub basic: Dataset,
    pub adversarial: Vec<Dataset>,
}

/// Runs the configured strategy from an untrained model.
pub fn train(model: Model, data: &TrainData, cfg: &TrainConfig, eval: &[Dataset]) -> Result<(Model, RunReport)> {
    train_with_hook(model, data, cfg, eval, &mut |_, _| Ok(()))
}

/// [`train`], calling `on_phase` with the model and report after each phase.
pub fn train_with_hook(
    model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    eval: &[Dataset],
    on_phase: &mut dyn FnMut(&Model, &PhaseReport) -> Result<()>,
) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    if data.adversarial.is_empty() {
        return Err(config("need at least one adversarial dataset"));
    }
    let started = Instant::now();
    let smoa = cfg.smoa_for(data.adversarial.len())?;
    match cfg.strategy {
        Strategy::TwoStage => {
            let mut model = model;
            let p1 = train_full(&mut model, &data.basic, View::Full, cfg, eval)?;
            on_phase(&model, &p1)?;
            let (model, p2, before, after) = train_smoa(model, &data.adversarial, cfg, eval)?;
            on_phase(&model, &p2)?;
            let report = RunReport {
                strategy: cfg.strategy,
                seed: cfg.seed,
                train_head: cfg.train_head,
                smoa: Some(smoa),
                phases: vec![p1, p2],
                params: ParamSummary::of(&model),
                backbone_hash_before: Some(before),
                backbone_hash_after: Some(after),
                wall_time_secs: started.elapsed().as_secs_f64(),
            };
            Ok((model, report))
        }
        Strategy::OneStage => {
            let mut model = model.insert_smoa(smoa, cfg.seed ^ 0x5EED_5A0A)?;
            if cfg.one_stage_tune_backbone {
                model.unfreeze_all();
            } else {
                model.freeze_backbone(cfg.train_head)?;
            }
            let before = model.backbone_hash();
            let mut sets = vec![data.basic.clone()];
            sets.extend(data.adversarial.iter().cloned());
            let prepared: Vec<Prepared> = match cfg.mixing {
                Mixing::PerDataset => sets.iter().map(|d| Prepared::new(d, View::Full)).collect(),
                Mixing::Concat => {
                    let all: Vec<Example> = sets.iter().flat_map(|d| d.examples.iter().cloned()).collect();
                    vec![Prepared::new(&Dataset::new("mixed", all), View::Full)]
                }
            };
            let phase = Phase {
                learning_rate: cfg.learning_rate,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                adam: cfg.adam,
                seed: cfg.seed,
            };
            let phase_started = Instant::now();
            let epochs = fit(&mut model, &prepared, &phase)?;
            let p = phase_report("one_stage", &model, &prepared, epochs, eval, phase_started)?;
            on_phase(&model, &p)?;
            let after = model.backbone_hash();
            let report = RunReport {
                strategy: cfg.strategy,
                seed: cfg.seed,
                train_head: cfg.train_head,
                smoa: Some(smoa),
                phases: vec![p],
                params: ParamSummary::of(&model),
                backbone_hash_before: Some(before),
                backbone_hash_after: Some(after),
                wall_time_secs: started.elapsed().as_secs_f64(),
            };
            Ok((model, report))
        }
    }
}

#[cfg(test)]
mod tests;
