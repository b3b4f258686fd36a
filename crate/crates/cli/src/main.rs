//! `urt`: generate synthetic stores, train, evaluate and analyze URT layers.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use urt_core::{ErrorCategory, UrtError};

#[derive(Parser, Debug)]
#[command(name = "urt", version, about = "Universal representation transformer toolkit")]
struct Cli {
    /// Worker threads (default: available cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, shared by most subcommands.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat-key JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.episodes=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain feature store.
    GenSynth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: String,
    },
    /// Train a layer on a store.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: String,
        #[arg(long)]
        out: String,
    },
    /// Evaluate a trained model per domain.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        split: Option<String>,
        /// Tasks per domain.
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        report: String,
    },
    /// Compare analytic gradients with finite differences on random problems.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Train one model per head count and rank them on the validation split.
    SweepHeads {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: String,
        #[arg(long)]
        min: Option<usize>,
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        report: String,
    },
    /// Train with one component removed and compare against the full layer.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: String,
        /// no_wq, no_wk, no_setrep or no_reg.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        report: String,
    },
    /// Export mean attention per head, domain and backbone.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        store: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        tasks: Option<usize>,
        /// Output prefix; writes PREFIX.csv, PREFIX.json and PREFIX_head<h>.pgm.
        #[arg(long)]
        out: String,
    },
}

/// Failure of a subcommand, with its exit code.
pub enum Failure {
    Urt(UrtError),
    /// A check that ran to completion but did not pass.
    Check(String),
}

impl From<UrtError> for Failure {
    fn from(e: UrtError) -> Self {
        Failure::Urt(e)
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: config: --threads must be >= 1");
            return ExitCode::from(3);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: io: cannot start thread pool: {}", single_line(&e.to_string()));
            return ExitCode::from(1);
        }
    }

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Urt(e)) => {
            let category = e.category();
            eprintln!("error: {}: {}", category.as_str(), single_line(&e.to_string()));
            if category == ErrorCategory::Config {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Check(detail)) => {
            eprintln!("error: check: {}", single_line(&detail));
            ExitCode::from(1)
        }
    }
}
