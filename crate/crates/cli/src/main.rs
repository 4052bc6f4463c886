use clap::{Args, Parser, Subcommand};
use deqflow_cli::commands::{
    cmd_ablate_correction, cmd_bench_solvers, cmd_correlation_study, cmd_eval,
    cmd_sequence_reuse, cmd_train, AblateOptions,
};
use deqflow_cli::config::load_config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for logs, CSVs, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Overrides data.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config overrides, e.g. optimizer.lr=0.001.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(name = "deqflow", about = "Equilibrium flow estimation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on synthetic flow data.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the held-out set.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one arm per correction frequency under a shared solver
    /// budget and compare stability.
    AblateCorrection {
        #[command(flatten)]
        common: CommonArgs,
        /// Correction frequencies to train, each in 0..=3.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        freqs: Vec<usize>,
        /// Forward iteration budget shared by all arms.
        #[arg(long, default_value_t = 16)]
        budget: usize,
        /// Skip the exact-gradient (IFT) comparison arm.
        #[arg(long)]
        skip_ift_arm: bool,
        /// Skip the Jacobian-regularization comparison arms.
        #[arg(long)]
        skip_jr_arm: bool,
    },
    /// Compare cold and warm-started solves along video streams.
    SequenceReuse {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_streams: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
    },
    /// Relate fixed-point residuals to endpoint error over a difficulty
    /// sweep.
    CorrelationStudy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_samples: usize,
        /// Displacement caps cycled across samples.
        #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
        disps: Vec<f64>,
    },
    /// Iterations-to-tolerance for all solver methods on seeded random
    /// contractive maps.
    BenchSolvers {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

fn run() -> deqflow_cli::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common } => {
            let config = load_config(&common.config, &common.overrides, common.seed)?;
            cmd_train(&config, &common.out)?;
        }
        Command::Eval { common, checkpoint } => {
            let config = load_config(&common.config, &common.overrides, common.seed)?;
            cmd_eval(&config, &checkpoint, &common.out)?;
        }
        Command::AblateCorrection {
            common,
            freqs,
            budget,
            skip_ift_arm,
            skip_jr_arm,
        } => {
            let config = load_config(&common.config, &common.overrides, common.seed)?;
            let opts = AblateOptions {
                freqs,
                budget,
                with_ift_arm: !skip_ift_arm,
                with_jr_arm: !skip_jr_arm,
                ..AblateOptions::default()
            };
            cmd_ablate_correction(&config, &common.out, &opts)?;
        }
        Command::SequenceReuse {
            common,
            checkpoint,
            n_streams,
            frames,
        } => {
            let config = load_config(&common.config, &common.overrides, common.seed)?;
            cmd_sequence_reuse(&config, &checkpoint, &common.out, n_streams, frames)?;
        }
        Command::CorrelationStudy {
            common,
            checkpoint,
            n_samples,
            disps,
        } => {
            let config = load_config(&common.config, &common.overrides, common.seed)?;
            cmd_correlation_study(&config, &checkpoint, &common.out, n_samples, &disps)?;
        }
        Command::BenchSolvers {
            common,
            dim,
            radii,
            trials,
        } => {
            let config = load_config(&common.config, &common.overrides, common.seed)?;
            cmd_bench_solvers(&config, &common.out, dim, &radii, trials)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deqflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
