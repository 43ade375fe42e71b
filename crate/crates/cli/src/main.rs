//! `fpi`: phantom generation, training, scoring and evaluation pipelines.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpi_core::manifest::SplitFractions;
use fpi_core::scorer::{Aggregator, ScoringConfig};
use fpi_core::synth::AlphaMode;
use fpi_core::testbench::TestbenchConfig;
use fpi_core::{Error, ErrorClass, Result};

use crate::commands::RunFlags;
use crate::config::ModelPreset;

#[derive(Parser)]
#[command(name = "fpi", version, about = "Self-supervised anomaly detection with foreign patch interpolation")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible training.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus and its manifest.
    Phantom {
        #[arg(long)]
        count: usize,
        /// Volume shape as D,H,W (or a single extent for a cube).
        #[arg(long, value_parser = parse_shape, default_value = "64")]
        shape: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export interpolated training samples from the training split.
    Synth {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "continuous")]
        mode: AlphaMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the synthetic anomaly test set from the test splits.
    MakeTestset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test bench settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train(RunArgs),
    /// Weight averaging phase starting from a trained checkpoint.
    Swa {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score volumes with a trained model.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test set directory or dataset manifest.
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long, default_value = "mean")]
        slice_aggregator: Aggregator,
        #[arg(long, default_value = "max")]
        subject_aggregator: Aggregator,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute subject and pixel metrics for scored test cases.
    Evaluate {
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON); takes precedence over every other flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AlphaMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cap on batches per epoch.
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    swa_epochs: Option<usize>,
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
}

impl RunArgs {
    fn flags(&self) -> RunFlags {
        RunFlags {
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            mode: self.mode,
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            max_batches: self.max_batches,
            swa_epochs: self.swa_epochs,
            model: self.model,
        }
    }
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("expected one or three extents, got {s:?}")),
    }
}

fn load_testbench(path: Option<&PathBuf>) -> Result<TestbenchConfig> {
    let Some(path) = path else {
        return Ok(TestbenchConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom { count, shape, seed, out } => {
            commands::phantom(count, shape, seed, SplitFractions::default(), &out)
        }
        Command::Synth {
            manifest,
            mode,
            seed,
            count,
            out,
        } => commands::synth(&manifest, mode, seed, count, &out),
        Command::MakeTestset {
            manifest,
            seed,
            config,
            out,
        } => commands::make_testset(&manifest, seed, &load_testbench(config.as_ref())?, &out),
        Command::Train(args) => {
            let cfg = commands::resolve_run_config(args.config.as_deref(), &args.flags())?;
            commands::train_cmd(&cfg)
        }
        Command::Swa { run, checkpoint } => {
            let cfg = commands::resolve_run_config(run.config.as_deref(), &run.flags())?;
            commands::swa_cmd(&cfg, &checkpoint)
        }
        Command::Score {
            checkpoint,
            volumes,
            slice_aggregator,
            subject_aggregator,
            batch_size,
            out,
        } => {
            let config = ScoringConfig {
                slice_aggregator,
                subject_aggregator,
                batch_size,
            };
            commands::score(&checkpoint, &volumes, &config, &out)
        }
        Command::Evaluate { testset, scores, out } => commands::evaluate_cmd(&testset, &scores, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
