use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use soap3d_cli::{self as cli, RunConfig};

/// SOAP place descriptors for LiDAR scans: synthetic data, feature
/// extraction, training and recall evaluation.
#[derive(Parser, Debug)]
#[command(name = "soap3d", version)]
struct Cli {
    /// Line-based `[section]` / `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives the bit-reproducible mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override one config entry, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic orchard dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract per-voxel local features for every scan of a dataset.
    Extract {
        #[arg(long)]
        data: PathBuf,
        /// Feature directory (default `<data>/features`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the head with triplet tuples mined from one dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Run directory of an earlier `train` to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-radius recall evaluation.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Trained checkpoint; omitted means the untrained head.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall over a grid of k and radii, overall and per segment.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-row stage ablation: none, FC, FC+LOG, FC+LOG+PN.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset (default: the training dataset).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-out cross-validation over several datasets.
    Crossval {
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match &cli.command {
        Command::GenSynth { out } => cli::cmd_gen_synth(&cfg, out),
        Command::Extract { data, out } => cli::cmd_extract(&cfg, data, out.as_deref()),
        Command::Train {
            data,
            features,
            resume,
            out,
        } => cli::cmd_train(
            &cfg,
            &cli::TrainArgs {
                data,
                features: features.as_deref(),
                resume: resume.as_deref(),
                out,
            },
        ),
        Command::Eval {
            data,
            features,
            model,
            out,
        } => cli::cmd_eval(
            &cfg,
            &cli::EvalArgs {
                data,
                features: features.as_deref(),
                model: model.as_deref(),
                out,
            },
        )
        .map(drop),
        Command::Sweep {
            data,
            features,
            model,
            out,
        } => cli::cmd_sweep(
            &cfg,
            &cli::EvalArgs {
                data,
                features: features.as_deref(),
                model: model.as_deref(),
                out,
            },
        )
        .map(drop),
        Command::Ablate { data, eval_data, out } => cli::cmd_ablate(
            &cfg,
            &cli::AblateArgs {
                data,
                eval_data: eval_data.as_deref(),
                out,
            },
        )
        .map(drop),
        Command::Crossval { data, out } => cli::cmd_crossval(&cfg, data, out).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
