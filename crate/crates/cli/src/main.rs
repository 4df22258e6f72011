use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use upcc_cli::experiments::{
    cmd_ablation, cmd_downsample_sweep, cmd_gen, cmd_length_sweep, cmd_pipeline, cmd_scale_sweep, cmd_stats, cmd_vocab,
};
use upcc_cli::{Context, ExperimentConfig, Report};
use upcc_core::crosscontext::Variant;

#[derive(Parser)]
#[command(name = "upcc", version, about = "User-product cross-context sentiment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: runs/<experiment.name>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding experiment.seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Variant overriding train.variant.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Reuse finished runs and pretrained encoders found in the output directory.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic corpus and its Bayes oracle.
    Gen,
    /// Print corpus statistics.
    Stats,
    /// Build and save the vocabulary.
    Vocab,
    /// Train and evaluate one variant.
    Pipeline,
    /// Train the four variants with shared seeds.
    Ablation,
    /// Sweep the entity-matrix scaling factor.
    ScaleSweep,
    /// Sweep the fraction of each user's training reviews.
    DownsampleSweep,
    /// Sweep the maximum sequence length of the text-only model.
    LengthSweep,
}

fn print_report(report: &Report) {
    println!("{} ({}), config {}", report.command, report.experiment, &report.config_hash[..12]);
    for r in &report.rows {
        println!(
            "  {:<28} dev acc {:.4} ± {:.4}  rmse {:.4}{}",
            r.setting,
            r.dev_accuracy.mean,
            r.dev_accuracy.std,
            r.dev_rmse.mean,
            r.truncated_pct.map(|t| format!("  truncated {t:.1}%")).unwrap_or_default()
        );
    }
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("UPCC_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("UPCC_THREADS={v} is not a count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<()> {
    let path = cli.config.context("--config PATH is required")?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seeds) = cli.seeds {
        config.experiment.seeds = seeds;
    }
    if let Some(v) = cli.variant {
        config.train.variant = v;
    }
    config.validate()?;
    let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(&config.experiment.name));
    let variant = config.train.variant;
    let ctx = Context {
        threads: threads_from_env()?,
        resume: cli.resume,
        ..Context::new(config, out)
    };
    let report = match cli.command {
        Command::Gen => {
            let summary = cmd_gen(&ctx).context("gen")?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            return Ok(());
        }
        Command::Stats => {
            let stats = cmd_stats(&ctx).context("stats")?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            return Ok(());
        }
        Command::Vocab => {
            let vocab = cmd_vocab(&ctx).context("vocab")?;
            println!("vocabulary of {} entries written to {}", vocab.len(), ctx.out.join("vocab.txt").display());
            return Ok(());
        }
        Command::Pipeline => cmd_pipeline(&ctx, variant).context("pipeline")?,
        Command::Ablation => cmd_ablation(&ctx).context("ablation")?,
        Command::ScaleSweep => cmd_scale_sweep(&ctx).context("scale-sweep")?,
        Command::DownsampleSweep => cmd_downsample_sweep(&ctx).context("downsample-sweep")?,
        Command::LengthSweep => cmd_length_sweep(&ctx).context("length-sweep")?,
    };
    print_report(&report);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
