use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use smoa_core::analysis::{
    measure_forward_time, param_report, scale_report, EncoderDims, ScaleReport,
};
use smoa_core::checkpoint;
use smoa_core::experiment::{
    analyze_routing, eval_checkpoint, gen_data, generate, repro, train_run, write_json,
    ExperimentConfig,
};
use smoa_core::Error;

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "smoa", version, about = "Sparse mixture-of-adapters debiasing lab")]
struct Cli {
    /// JSON experiment config, merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path scalar override, e.g. `train.epochs=3`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize every dataset of a run, with manifests.
    GenData,
    /// Run the configured training strategy and write checkpoints.
    Train,
    /// Score a checkpoint on named evaluation splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split name (`test`, `LX_A`, ...). Repeatable; default all.
        #[arg(long = "split")]
        splits: Vec<String>,
    },
    /// Record gate decisions on the challenge variants.
    Routing {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parameter accounting, forward timing, and large-encoder projections.
    Params {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        timing_batches: usize,
    },
    /// Full pipeline end to end.
    Repro,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let is_config = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
        if is_config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let preset = match cli.preset {
        Preset::Desk => ExperimentConfig::default(),
        Preset::Smoke => ExperimentConfig::smoke(),
    };
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &preset, &cli.overrides)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => preset.with_overrides(&cli.overrides)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<smoa_core::Model> {
    checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli).map_err(Failure::Config)?;
    let out = cfg.out_dir.clone();
    match &cli.command {
        Command::GenData => {
            let summary = gen_data(&cfg, &out)?;
            print_json(&summary)?;
        }
        Command::Train => {
            let run = train_run(&cfg, Some(&out))?;
            print_json(&run.report.final_accuracy())?;
        }
        Command::Eval { checkpoint, splits } => {
            let model = load_checkpoint(checkpoint)?;
            let acc = eval_checkpoint(&cfg, &model, splits)?;
            print_json(&acc)?;
        }
        Command::Routing { checkpoint } => {
            let model = load_checkpoint(checkpoint)?;
            let splits = generate(&cfg)?;
            let (trace, analysis) = analyze_routing(&model, &splits.challenges)?;
            let dir = out.join("routing");
            std::fs::create_dir_all(&dir).context("creating routing directory")?;
            trace.write_jsonl(&dir.join("trace.jsonl"))?;
            std::fs::write(dir.join("distributions.csv"), analysis.distributions_csv())
                .context("writing distributions")?;
            std::fs::write(dir.join("correlations.csv"), analysis.correlations_csv())
                .context("writing correlations")?;
            print_json(&analysis.family_contrast(smoa_core::analysis::name_prefix))?;
        }
        Command::Params {
            checkpoint,
            timing_batches,
        } => {
            let mut report = serde_json::Map::new();
            if let Some(path) = checkpoint {
                let model = load_checkpoint(path)?;
                let mut params = param_report(&model)?;
                if model.smoa.is_some() && *timing_batches > 0 {
                    let test = generate(&cfg)?.test;
                    let pairs: Vec<_> = test.examples.iter().map(|e| e.encode()).collect();
                    let batches = pairs
                        .chunks(cfg.train.batch_size)
                        .cycle()
                        .take(*timing_batches)
                        .map(|c| model.encode_batch(c))
                        .collect::<smoa_core::Result<Vec<_>>>()?;
                    params.timing = Some(measure_forward_time(&model, &batches)?);
                }
                report.insert("model".into(), serde_json::to_value(params).map_err(anyhow::Error::from)?);
            }
            let scale: Vec<ScaleReport> = (16..=32)
                .map(|db| scale_report(&EncoderDims::ROBERTA_BASE, 5, db))
                .collect();
            report.insert("roberta_base".into(), serde_json::to_value(scale).map_err(anyhow::Error::from)?);
            std::fs::create_dir_all(&out).context("creating output directory")?;
            write_json(&out.join("params.json"), &report)?;
            print_json(&report)?;
        }
        Command::Repro => {
            let summary = repro(&cfg)?;
            print_json(&summary)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            log::error!("configuration error: {e:#}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(Failure::Runtime(e)) => {
            log::error!("{e:#}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}
