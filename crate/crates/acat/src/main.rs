use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use acat::config::RunConfig;
use acat::pipeline::{
    cmd_ablate, cmd_evaluate, cmd_gen_counterfactuals, cmd_gen_data, cmd_gen_saliency,
    cmd_pipeline, cmd_train_acat, cmd_train_ae, cmd_train_baseline, Ctx,
};

#[derive(Parser)]
#[command(name = "acat", about = "Counterfactual saliency and attention experiments")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; stages currently run single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset archive.
    GenData,
    /// Train the plain classifier.
    TrainBaseline,
    /// Train the reconstruction autoencoder.
    TrainAe,
    /// Export counterfactual traces and difference maps for test positives.
    GenCounterfactuals,
    /// Compute saliency maps for every sample.
    GenSaliency {
        /// Override the config's saliency method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train the saliency-attention classifier.
    TrainAcat,
    /// Score both classifiers and every map store.
    Evaluate,
    /// Multi-seed ablation ladder and dropout control.
    Ablate,
    /// Everything from data generation to evaluation, resuming where possible.
    Pipeline,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .context("--config is required; point it at a run configuration")?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = Some(out);
    }
    if let Cmd::GenSaliency { method: Some(ref m) } = cli.cmd {
        config.saliency.method = m.clone();
    }
    config.validate()?;
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let root = config
        .out
        .clone()
        .context("no output root; set out in the config or pass --out")?;
    let ctx = Ctx::new(root, config, cli.threads);
    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&ctx),
        Cmd::TrainBaseline => cmd_train_baseline(&ctx),
        Cmd::TrainAe => cmd_train_ae(&ctx),
        Cmd::GenCounterfactuals => cmd_gen_counterfactuals(&ctx),
        Cmd::GenSaliency { .. } => cmd_gen_saliency(&ctx),
        Cmd::TrainAcat => cmd_train_acat(&ctx),
        Cmd::Evaluate => cmd_evaluate(&ctx),
        Cmd::Ablate => cmd_ablate(&ctx),
        Cmd::Pipeline => cmd_pipeline(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
