//! Config-driven runs: data synthesis, probe filtering, two-phase training,
//! routing analysis, and the artifacts each step leaves on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{
    name_prefix, param_report, record_routing, FamilyContrast, ParamReport, RoutingAnalysis,
    RoutingTrace,
};
use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::data::{
    biased_tokens, filter_hard, filter_unbiased, gen_challenge, gen_challenge_variant, gen_dataset,
    write_split, BiasKind, BiasSpec, ChallengeVariant, Dataset, DatasetManifest, TaskParams,
    TaskSpec,
};
use crate::error::{config, Error, Result};
use crate::model::{Model, PartialInput};
use crate::training::{
    evaluate_all, train_full, train_smoa, train_with_hook, ParamSummary, RunReport, TrainConfig,
    TrainData, View,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub test: usize,
    /// Examples per challenge variant; each bias family has two variants.
    pub challenge_variant: usize,
    /// Size of the overlap challenge set used as adversarial training data.
    pub overlap_train: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 20_000,
            test: 2_000,
            challenge_variant: 1_000,
            overlap_train: 4_000,
        }
    }
}

/// Hypothesis-only probe used to select hard examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 32,
        }
    }
}

/// Thresholds for the lexical filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub freq_threshold: usize,
    pub ratio_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            freq_threshold: 3,
            ratio_threshold: 0.385,
        }
    }
}

/// Everything a run depends on. Component seeds (`task.seed`,
/// `backbone.seed`, `train.seed`) are derived from `seed` by [`resolved`].
///
/// [`resolved`]: ExperimentConfig::resolved
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskParams,
    pub biases: Vec<BiasSpec>,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data: DataSizes,
    pub probe: ProbeConfig,
    pub filter: FilterConfig,
    /// Additional phase-2 seeds, each retrained from the same phase-1 model
    /// for routing analysis.
    pub extra_routing_seeds: Vec<u64>,
    /// Not part of the config hash, and omitted from written configs.
    #[serde(skip_serializing_if = "is_empty_path")]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale run.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            task: TaskParams::default(),
            biases: vec![
                BiasSpec::new(BiasKind::Lexical, 0.95, 0.6),
                BiasSpec::new(BiasKind::PartialInput, 0.95, 0.6),
                BiasSpec::new(BiasKind::Overlap, 0.95, 1.0),
            ],
            backbone: BackboneConfig {
                vocab_size: 200,
                d_model: 64,
                n_heads: 4,
                n_layers: 2,
                d_ff: 128,
                max_len: 16,
                n_classes: 3,
                seed: 0,
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 12,
                batch_size: 32,
                backbone_learning_rate: 1e-3,
                backbone_epochs: 3,
                bottleneck: 32,
                ..TrainConfig::default()
            },
            data: DataSizes::default(),
            probe: ProbeConfig::default(),
            filter: FilterConfig::default(),
            extra_routing_seeds: vec![1, 2],
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

/// Seeds for every random stream of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub task: u64,
    pub backbone: u64,
    pub probe: u64,
    pub train: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub challenge_data: u64,
    pub overlap_data: u64,
}

/// First eight bytes of `sha256("{seed}/{stream}")`.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{stream}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ExperimentConfig {
    /// A run small enough for tests: a few hundred examples, one epoch each.
    pub fn smoke() -> Self {
        let d = ExperimentConfig::default();
        ExperimentConfig {
            backbone: BackboneConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 32,
                ..d.backbone.clone()
            },
            train: TrainConfig {
                epochs: 1,
                backbone_epochs: 1,
                batch_size: 16,
                bottleneck: 4,
                ..d.train.clone()
            },
            data: DataSizes {
                train: 5_000,
                test: 120,
                challenge_variant: 60,
                overlap_train: 120,
            },
            probe: ProbeConfig {
                epochs: 1,
                ..d.probe.clone()
            },
            extra_routing_seeds: vec![],
            out_dir: PathBuf::from("runs/smoke"),
            ..d
        }
    }

    /// Reads a JSON config, merges it over `base`, applies `key=value`
    /// overrides, and validates.
    pub fn load(path: &Path, base: &ExperimentConfig, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, base, overrides)
    }

    /// Objects in `value` merge field by field into `base`; anything else
    /// replaces the base value.
    pub fn from_value(value: Value, base: &ExperimentConfig, overrides: &[String]) -> Result<Self> {
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, value);
        let cfg: ExperimentConfig =
            serde_json::from_value(merged).map_err(|e| config(e.to_string()))?;
        cfg.with_overrides(overrides)
    }

    /// Applies dotted-path overrides such as `train.epochs=3`. Values parse
    /// as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let task = TaskSpec::new(self.task.clone())?;
        for b in &self.biases {
            b.validate()?;
        }
        self.backbone.validate()?;
        self.train.validate()?;
        if self.backbone.vocab_size < self.task.vocab_size {
            return Err(config(format!(
                "backbone vocab {} smaller than task vocab {}",
                self.backbone.vocab_size, self.task.vocab_size
            )));
        }
        if self.backbone.n_classes != task.n_classes() {
            return Err(config("backbone and task disagree on the number of classes"));
        }
        if self.backbone.max_len < self.task.len_a + self.task.len_b + 3 {
            return Err(config("max_len too short for the task's segments"));
        }
        let d = &self.data;
        if d.train == 0 || d.test == 0 || d.challenge_variant == 0 || d.overlap_train == 0 {
            return Err(config("dataset sizes must be positive"));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 || !(self.probe.learning_rate > 0.0) {
            return Err(config("probe needs positive epochs, batch size and learning rate"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            task: derive_seed(s, "task"),
            backbone: derive_seed(s, "backbone"),
            probe: derive_seed(s, "probe"),
            train: derive_seed(s, "train"),
            train_data: derive_seed(s, "data/train"),
            test_data: derive_seed(s, "data/test"),
            challenge_data: derive_seed(s, "data/challenge"),
            overlap_data: derive_seed(s, "data/overlap"),
        }
    }

    /// The config with component seeds filled in from `seed`.
    pub fn resolved(&self) -> Self {
        let s = self.seeds();
        let mut c = self.clone();
        c.task.seed = s.task;
        c.backbone.seed = s.backbone;
        c.train.seed = s.train;
        c
    }

    /// Hex SHA-256 of the resolved config's JSON, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.portable()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Resolved config without the output directory, as written to runs.
    pub fn portable(&self) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: PathBuf::new(),
            ..self.resolved()
        }
    }
}

fn is_empty_path(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets the scalar at a dotted path. The path must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config(format!("override {spec:?} is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    if new.is_object() || new.is_array() {
        return Err(config(format!("override {path}: only scalar values are allowed")));
    }
    let mut cur = root;
    for key in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| config(format!("override {path}: no such field")))?;
    }
    if cur.is_object() || cur.is_array() {
        return Err(config(format!("override {path}: not a scalar field")));
    }
    *cur = new;
    Ok(())
}

/// Basic, evaluation and challenge splits of a run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub task: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    /// One split per challenge variant, named by [`ChallengeVariant::name`].
    pub challenges: Vec<Dataset>,
}

impl Splits {
    pub fn eval(&self) -> Vec<Dataset> {
        let mut v = vec![self.test.clone()];
        v.extend(self.challenges.iter().cloned());
        v
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Splits> {
    let cfg = cfg.resolved();
    let s = cfg.seeds();
    let task = TaskSpec::new(cfg.task.clone())?;
    let train = gen_dataset(&task, &cfg.biases, cfg.data.train, s.train_data)?.renamed("train");
    let test = gen_dataset(&task, &cfg.biases, cfg.data.test, s.test_data)?.renamed("test");
    let challenges = ChallengeVariant::ALL
        .iter()
        .map(|&v| {
            let seed = derive_seed(s.challenge_data, v.name());
            gen_challenge_variant(&task, v, cfg.data.challenge_variant, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Splits {
        task,
        train,
        test,
        challenges,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub probe_accuracy: f64,
    pub probe_degenerate: bool,
    pub hard: usize,
    pub lls: usize,
    pub lls_biased_tokens: Vec<u32>,
    pub overlap: usize,
}

/// The adversarial training sets: probe-selected hard examples, the
/// lexically filtered subset, and an overlap challenge set.
pub fn adversarial_sets(cfg: &ExperimentConfig, splits: &Splits) -> Result<(Vec<Dataset>, FilterSummary)> {
    let cfg = cfg.resolved();
    let s = cfg.seeds();
    let mut probe = Model::new(BackboneConfig {
        seed: s.probe,
        ..cfg.backbone.clone()
    })?;
    let probe_cfg = TrainConfig {
        backbone_learning_rate: cfg.probe.learning_rate,
        backbone_epochs: cfg.probe.epochs,
        batch_size: cfg.probe.batch_size,
        seed: s.probe,
        ..cfg.train.clone()
    };
    train_full(&mut probe, &splits.train, View::PartialInput, &probe_cfg, &[])?;
    let (hard, report) = filter_hard(&splits.train, &PartialInput(&probe))?;
    for w in &report.warnings {
        log::warn!("hard filter: {w}");
    }
    let (f, r) = (cfg.filter.freq_threshold, cfg.filter.ratio_threshold);
    let lls = filter_unbiased(&splits.train, f, r)?;
    let overlap = gen_challenge(&splits.task, BiasKind::Overlap, cfg.data.overlap_train, s.overlap_data)?;
    let summary = FilterSummary {
        probe_accuracy: report.probe_accuracy,
        probe_degenerate: report.degenerate,
        hard: hard.len(),
        lls: lls.len(),
        lls_biased_tokens: biased_tokens(&splits.train.examples, splits.task.n_classes(), f, r),
        overlap: overlap.len(),
    };
    Ok((
        vec![hard.renamed("hard"), lls.renamed("lls"), overlap.renamed("overlap")],
        summary,
    ))
}

/// Accuracy on one bias family's challenge variants before and after
/// SMoA training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub family: String,
    pub phase1: f64,
    pub phase2: f64,
    pub gain: f64,
}

/// Routing specialization of one phase-2 model on the challenge variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub seed: u64,
    pub layer: usize,
    pub contrast: FamilyContrast,
    pub specialized: bool,
}

/// Reproducible metrics of a run; no wall-clock values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub phase1_accuracy: BTreeMap<String, f64>,
    pub phase2_accuracy: BTreeMap<String, f64>,
    pub in_domain_phase1: f64,
    pub in_domain_phase2: f64,
    pub in_domain_drop: f64,
    pub families: Vec<FamilyMetrics>,
    pub filters: FilterSummary,
    pub backbone_unchanged: bool,
    pub backbone_hash: Option<String>,
    pub params: ParamSummary,
    pub smoa_formula: Option<usize>,
    pub routing: Vec<RoutingSummary>,
}

impl Summary {
    pub fn family(&self, family: &str) -> Option<&FamilyMetrics> {
        self.families.iter().find(|f| f.family == family)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Data synthesis through phase-2 evaluation.
    pub pipeline_secs: f64,
    pub phase_secs: BTreeMap<String, f64>,
    pub routing_secs: f64,
    pub total_secs: f64,
}

/// Family accuracies as the mean over each family's two variants; variant
/// splits have equal sizes, so this equals pooled accuracy.
pub fn family_metrics(before: &BTreeMap<String, f64>, after: &BTreeMap<String, f64>) -> Vec<FamilyMetrics> {
    BiasKind::ALL
        .iter()
        .filter_map(|&k| {
            let names = ChallengeVariant::for_kind(k).map(|v| v.name());
            let mean = |m: &BTreeMap<String, f64>| -> Option<f64> {
                Some((m.get(names[0])? + m.get(names[1])?) / 2.0)
            };
            let (p1, p2) = (mean(before)?, mean(after)?);
            Some(FamilyMetrics {
                family: k.name().into(),
                phase1: p1,
                phase2: p2,
                gain: p2 - p1,
            })
        })
        .collect()
}

/// Routes every challenge variant through `model` and compares routing
/// distributions within and across bias families at the last layer.
pub fn analyze_routing(model: &Model, challenges: &[Dataset]) -> Result<(RoutingTrace, RoutingAnalysis)> {
    let mut trace: Option<RoutingTrace> = None;
    for d in challenges {
        let t = record_routing(model, d)?;
        match trace.as_mut() {
            Some(acc) => acc.merge(t)?,
            None => trace = Some(t),
        }
    }
    let trace = trace.ok_or_else(|| config("no challenge splits to route"))?;
    let subsets = trace.subsets();
    let analysis = RoutingAnalysis::new(&trace, trace.last_layer(), &subsets, false)?;
    Ok((trace, analysis))
}

fn routing_summary(seed: u64, analysis: &RoutingAnalysis) -> RoutingSummary {
    let contrast = analysis.family_contrast(name_prefix);
    RoutingSummary {
        seed,
        layer: analysis.layer,
        specialized: contrast.specialized(),
        contrast,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Writes `manifest.json` in `dir` covering `files` (relative to `dir`).
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<()> {
    let mut artifacts = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(dir.join(f))?;
        artifacts.push(ArtifactEntry {
            path: f.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let m = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        artifacts,
    };
    write_json(&dir.join("manifest.json"), &m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Collects artifact paths relative to an output directory.
struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let rel = rel.as_ref().to_path_buf();
        let full = self.dir.join(&rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel);
        Ok(full)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        write_json(&p, value)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(p, text)?;
        Ok(())
    }

    fn split(&mut self, ds: &Dataset, manifest: &DatasetManifest) -> Result<()> {
        write_split(ds, &self.dir.join("data"), manifest)?;
        self.files.push(PathBuf::from(format!("data/{}.jsonl", ds.name)));
        self.files.push(PathBuf::from(format!("data/{}.manifest.json", ds.name)));
        Ok(())
    }

    fn finish(self, cfg: &ExperimentConfig) -> Result<()> {
        write_manifest(&self.dir, cfg, &self.files)
    }
}

/// Writes every dataset of a run to `<out>/data` with manifests.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<FilterSummary> {
    let cfg = cfg.resolved();
    let s = cfg.seeds();
    let splits = generate(&cfg)?;
    let (adversarial, summary) = adversarial_sets(&cfg, &splits)?;
    let mut art = Artifacts::new(out)?;
    art.json("config.json", &cfg.portable())?;
    let describe = |d: &Dataset, seed: u64, source: &str| {
        DatasetManifest::describe(d, &splits.task, &cfg.biases, seed, source)
    };
    art.split(&splits.train, &describe(&splits.train, s.train_data, "gen_dataset"))?;
    art.split(&splits.test, &describe(&splits.test, s.test_data, "gen_dataset"))?;
    for c in &splits.challenges {
        art.split(c, &describe(c, derive_seed(s.challenge_data, &c.name), "gen_challenge_variant"))?;
    }
    let sources = [
        (s.probe, "filter_hard(train)"),
        (s.train_data, "filter_unbiased(train)"),
        (s.overlap_data, "gen_challenge(overlap)"),
    ];
    for (d, (seed, source)) in adversarial.iter().zip(sources) {
        art.split(d, &describe(d, seed, source))?;
    }
    art.json("filters.json", &summary)?;
    art.finish(&cfg)?;
    Ok(summary)
}

/// Outcome of [`train_run`].
pub struct TrainOutcome {
    pub model: Model,
    pub phase1: Model,
    pub report: RunReport,
    pub splits: Splits,
    pub filters: FilterSummary,
}

/// Synthesizes data, builds the adversarial sets and runs the configured
/// strategy. With `out`, checkpoints after each phase and writes the run
/// report.
pub fn train_run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let splits = generate(&cfg)?;
    let (adversarial, filters) = adversarial_sets(&cfg, &splits)?;
    let data = TrainData {
        basic: splits.train.clone(),
        adversarial,
    };
    let eval = splits.eval();
    let mut phase1: Option<Model> = None;
    let mut ckpts = Vec::new();
    let mut hook = |m: &Model, p: &crate::training::PhaseReport| -> Result<()> {
        let name = match p.name.as_str() {
            "full" => {
                phase1 = Some(m.clone());
                "phase1"
            }
            "smoa" => "phase2",
            other => other,
        };
        if let Some(dir) = out {
            let rel = PathBuf::from("checkpoints").join(format!("{name}.ckpt"));
            fs::create_dir_all(dir.join("checkpoints"))?;
            checkpoint::save(m, &dir.join(&rel))?;
            ckpts.push(rel);
        }
        Ok(())
    };
    let model = Model::new(cfg.backbone.clone())?;
    let (model, report) = train_with_hook(model, &data, &cfg.train, &eval, &mut hook)?;
    let phase1 = phase1.unwrap_or_else(|| model.clone());
    if let Some(dir) = out {
        let mut art = Artifacts::new(dir)?;
        art.files = ckpts;
        art.json("config.json", &cfg.portable())?;
        art.json("run_report.json", &report.without_timing())?;
        let csv = art.path("epochs.csv")?;
        report.write_epoch_csv(&csv)?;
        art.json("filters.json", &filters)?;
        art.finish(&cfg)?;
        write_json(&dir.join("timing.json"), &report)?;
    }
    Ok(TrainOutcome {
        model,
        phase1,
        report,
        splits,
        filters,
    })
}

/// The full pipeline: data, filters, both phases, evaluation, routing for
/// every phase-2 seed, and every artifact under `cfg.out_dir`.
pub fn repro(cfg: &ExperimentConfig) -> Result<Summary> {
    let started = Instant::now();
    let cfg = cfg.resolved();
    cfg.validate()?;
    if cfg.train.strategy != crate::training::Strategy::TwoStage {
        return Err(config("repro runs the two-stage strategy"));
    }
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    let run = train_run(&cfg, Some(&out))?;
    let pipeline_secs = started.elapsed().as_secs_f64();
    let routing_started = Instant::now();

    let phases = &run.report.phases;
    let (p1, p2) = match phases.as_slice() {
        [a, b] => (a.accuracy.clone(), b.accuracy.clone()),
        _ => return Err(Error::Contract("two-stage run must report two phases".into())),
    };
    let families = family_metrics(&p1, &p2);
    let params: ParamReport = param_report(&run.model)?;

    let mut art = Artifacts::new(&out)?;
    let (trace, analysis) = analyze_routing(&run.model, &run.splits.challenges)?;
    let trace_path = art.path("routing/trace.jsonl")?;
    trace.write_jsonl(&trace_path)?;
    art.text("routing/distributions.csv", &analysis.distributions_csv())?;
    art.text("routing/correlations.csv", &analysis.correlations_csv())?;
    let mut routing = vec![routing_summary(cfg.train.seed, &analysis)];

    if !cfg.extra_routing_seeds.is_empty() {
        let (adversarial, _) = adversarial_sets(&cfg, &run.splits)?;
        for &extra in &cfg.extra_routing_seeds {
            let seed = derive_seed(cfg.seed, &format!("routing/{extra}"));
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (m, _, _, _) = train_smoa(run.phase1.clone(), &adversarial, &tc, &[])?;
            let (_, a) = analyze_routing(&m, &run.splits.challenges)?;
            art.text(&format!("routing/correlations_seed{extra}.csv"), &a.correlations_csv())?;
            routing.push(routing_summary(seed, &a));
        }
    }

    let in1 = p1.get("test").copied().unwrap_or(f64::NAN);
    let in2 = p2.get("test").copied().unwrap_or(f64::NAN);
    let summary = Summary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        phase1_accuracy: p1,
        phase2_accuracy: p2,
        in_domain_phase1: in1,
        in_domain_phase2: in2,
        in_domain_drop: in1 - in2,
        families,
        filters: run.filters.clone(),
        backbone_unchanged: run.report.backbone_unchanged(),
        backbone_hash: run.report.backbone_hash_after.clone(),
        params: ParamSummary::of(&run.model),
        smoa_formula: params.smoa_formula,
        routing,
    };
    art.json("params.json", &params)?;
    art.json("summary.json", &summary)?;
    // Earlier files (checkpoints, run report) are listed by train_run's
    // manifest; this one covers the analysis outputs.
    let mut files = art.files;
    files.extend(
        ["config.json", "run_report.json", "epochs.csv", "filters.json"]
            .iter()
            .map(PathBuf::from),
    );
    files.extend(["checkpoints/phase1.ckpt", "checkpoints/phase2.ckpt"].iter().map(PathBuf::from));
    write_manifest(&out, &cfg, &files)?;

    let mut phase_secs = BTreeMap::new();
    for p in &run.report.phases {
        phase_secs.insert(p.name.clone(), p.wall_time_secs);
    }
    let timing = Timing {
        pipeline_secs,
        phase_secs,
        routing_secs: routing_started.elapsed().as_secs_f64(),
        total_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("timing.json"), &timing)?;
    Ok(summary)
}

/// Accuracy of a checkpoint on named splits of the configured run.
pub fn eval_checkpoint(cfg: &ExperimentConfig, model: &Model, names: &[String]) -> Result<BTreeMap<String, f64>> {
    let splits = generate(cfg)?;
    let all = splits.eval();
    let chosen: Vec<Dataset> = if names.is_empty() {
        all
    } else {
        names
            .iter()
            .map(|n| {
                all.iter()
                    .find(|d| &d.name == n)
                    .cloned()
                    .ok_or_else(|| config(format!("unknown split {n:?}")))
            })
            .collect::<Result<_>>()?
    };
    evaluate_all(model, &chosen)
}
