//! Experiment CLI: train, eval, stability, sweep, ablate, export-embeddings.
//! Exit status 0 on success, 1 on usage errors, 2 on runtime errors.

use clap::{Args, Parser, Subcommand};
use dynmeta::config::{parse_config, RunConfig};
use dynmeta::harness;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dynmeta", version, about = "unsupervised meta-learning experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured mode and write checkpoint + metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint: few-shot episodes plus zero-shot clustering.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long = "adapt-steps")]
        adapt_steps: Option<usize>,
    },
    /// Train while recording per-layer representation stability.
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// Grid sweep: one short train+eval per cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Repeatable `key=v1,v2,...` axis.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
    },
    /// Run the component ablations (G1-G3 and the full method).
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Export per-sample embeddings of the config's dataset.
    #[command(name = "export-embeddings")]
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn load_config(common: &Common) -> dynmeta::Result<RunConfig> {
    let mut config = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn parse_grid(raw: &[String]) -> Result<Vec<(String, Vec<String>)>, String> {
    raw.iter()
        .map(|axis| {
            let (key, values) = axis
                .split_once('=')
                .ok_or_else(|| format!("--grid expects key=v1,v2,..., got '{axis}'"))?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            if values.is_empty() || values.iter().any(|v| v.is_empty()) {
                return Err(format!("--grid '{axis}' has empty values"));
            }
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

fn run(cli: Cli) -> dynmeta::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let config = load_config(&common)?;
            let arts = harness::run_train(&config)?;
            println!(
                "trained {} epochs; checkpoint {}",
                arts.report_epochs,
                arts.checkpoint_path.display()
            );
            println!("metrics {}", arts.metrics_path.display());
        }
        Command::Eval {
            common,
            ckpt,
            way,
            shot,
            episodes,
            adapt_steps,
        } => {
            let mut config = load_config(&common)?;
            if let Some(w) = way {
                config.eval_way = w;
            }
            if let Some(s) = shot {
                config.eval_shot = s;
            }
            if let Some(e) = episodes {
                config.eval_episodes = e;
            }
            if let Some(a) = adapt_steps {
                config.eval_adapt_steps = a;
            }
            config.validate()?;
            let reports = harness::run_eval(&config, &ckpt)?;
            for r in &reports {
                println!(
                    "{}: {:.4} ± {:.4} over {}",
                    r.metric_name, r.mean, r.ci95, r.n_episodes
                );
            }
        }
        Command::Stability { common } => {
            let config = load_config(&common)?;
            let arts = harness::run_stability(&config)?;
            println!(
                "{} stability rows over layers [{}]",
                arts.records,
                arts.layers.join(", ")
            );
            println!("csv {}", arts.csv_path.display());
            println!("svg {}", arts.svg_path.display());
        }
        Command::Sweep { common, grid } => {
            let config = load_config(&common)?;
            let grid = parse_grid(&grid).map_err(dynmeta::Error::Argument)?;
            let path = harness::run_sweep(&config, &grid)?;
            println!("sweep table {}", path.display());
        }
        Command::Ablate { common } => {
            let config = load_config(&common)?;
            let path = harness::run_ablate(&config)?;
            println!("ablation table {}", path.display());
        }
        Command::ExportEmbeddings { common, ckpt } => {
            let config = load_config(&common)?;
            let path = harness::run_export_embeddings(&config, &ckpt)?;
            println!("embeddings {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
