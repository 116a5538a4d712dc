use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankpool_cli::config::ExperimentConfig;
use rankpool_cli::{
    cmd_gradcheck, cmd_rank_demo, cmd_train, CliError, Fault, GradcheckOptions, RankDemoOptions,
};

/// Discriminative (multipartite) pooling experiments.
#[derive(Parser)]
#[command(name = "rankpool", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network once per pooling strategy.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Train the strategies concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference checks of the projection objective and of the tiny
    /// reference network under every pooling strategy.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Check only this regularization weight instead of {0, 0.1, 1, 10}.
        #[arg(long)]
        lambda: Option<f64>,
        /// Corrupt the analytic gradient on purpose (`regularizer-sign`).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Fit a projection and ranking model on one layer's activations and
    /// write column KL values and per-class score histograms.
    RankDemo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Rank the activations entering this layer (default: first pool).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        images: usize,
        /// Shuffle the labels before fitting (null control).
        #[arg(long)]
        permute_labels: bool,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            parallel,
        } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            for run in cmd_train(&cfg, &out, parallel)? {
                if let Some(m) = run.report.epochs.last() {
                    println!(
                        "{:<13} train err {:>6.2}%  test err {:>6.2}%  ({:.1}s)",
                        run.strategy.name(),
                        m.train_err_pct,
                        m.test_err_pct,
                        run.seconds
                    );
                }
            }
            println!("results in {}", out.display());
        }
        Command::Gradcheck {
            seed,
            instances,
            lambda,
            inject_fault,
        } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some("regularizer-sign") => Some(Fault::RegularizerSign),
                Some(other) => return Err(CliError::Config(format!("unknown fault {other:?}"))),
            };
            let mut opts = GradcheckOptions {
                seed,
                instances,
                fault,
                ..GradcheckOptions::default()
            };
            if let Some(l) = lambda {
                opts.lambdas = vec![l];
            }
            cmd_gradcheck(&opts)?;
            println!("gradient check passed");
        }
        Command::RankDemo {
            config,
            out,
            seed,
            layer,
            images,
            permute_labels,
        } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("rank-demo"));
            let opts = RankDemoOptions {
                layer,
                images,
                permute_labels,
                ..RankDemoOptions::default()
            };
            let res = cmd_rank_demo(&cfg, &out, &opts)?;
            for (i, kl) in res.column_kl.iter().enumerate() {
                println!("column {i}: kl {kl:.4}");
            }
            println!("results in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
