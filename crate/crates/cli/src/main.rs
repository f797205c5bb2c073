//! `tandem`: configuration-driven continual-learning experiments.

mod pipeline;

use clap::{Parser, Subcommand};
use pipeline::PipelineArgs;
use std::path::PathBuf;
use std::process::ExitCode;
use tandem_core::config::{validate_config, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "tandem",
    about = "Continual learning with replay and attention-gated distillation from a frozen pretrained sibling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip stages whose artifacts already exist.
    #[arg(long)]
    resume: bool,
    /// Validate and print the resolved plan without writing anything.
    #[arg(long)]
    dry_run: bool,
    /// Override the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration; prints one diagnostic per problem.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train (or reuse) the pretraining checkpoint only.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Full pipeline: pretrain, continual train, evaluate, analyze, report.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Recompute representation-drift curves from saved checkpoints.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Aggregate per-seed metrics into the report table and plots.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_validated(common: &CommonArgs) -> Result<(ExperimentConfig, PipelineArgs), ExitCode> {
    let diags = validate_config(&common.config);
    if !diags.is_empty() {
        eprintln!("configuration is not runnable:");
        for d in &diags {
            eprintln!("  {}", d);
        }
        return Err(ExitCode::from(2));
    }
    let cfg = match ExperimentConfig::from_path(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", e);
            return Err(ExitCode::from(2));
        }
    };
    Ok((
        cfg,
        PipelineArgs {
            output_override: common.output.clone(),
            seed_filter: common.seed,
            resume: common.resume,
            dry_run: common.dry_run,
        },
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { common } => {
            let diags = validate_config(&common.config);
            if diags.is_empty() {
                println!("{}: ok", common.config.display());
                ExitCode::SUCCESS
            } else {
                for d in &diags {
                    println!("{}", d);
                }
                ExitCode::from(2)
            }
        }
        Command::Pretrain { common } => {
            let (cfg, args) = match load_validated(&common) {
                Ok(v) => v,
                Err(code) => return code,
            };
            if args.dry_run {
                return finish(pipeline::print_plan(&cfg, &args));
            }
            finish(pipeline::pretrain_only(&cfg, &args))
        }
        Command::Run { common } => {
            let (cfg, args) = match load_validated(&common) {
                Ok(v) => v,
                Err(code) => return code,
            };
            if args.dry_run {
                return finish(pipeline::print_plan(&cfg, &args));
            }
            finish(pipeline::run_experiment(&cfg, &args))
        }
        Command::Analyze { common } => {
            let (cfg, args) = match load_validated(&common) {
                Ok(v) => v,
                Err(code) => return code,
            };
            finish(pipeline::analyze_experiment(&cfg, &args))
        }
        Command::Report { common } => {
            let (cfg, args) = match load_validated(&common) {
                Ok(v) => v,
                Err(code) => return code,
            };
            finish(pipeline::aggregate_report(&cfg, &args))
        }
    }
}

fn finish(result: tandem_core::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
