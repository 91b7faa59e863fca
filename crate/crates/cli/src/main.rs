use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spl_core::experiment::{
    run_experiment, summarize, write_artifacts, ExperimentConfig, ExperimentId, Manifest,
};
use spl_core::SplError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "spl", version, about = "Semi-pessimistic pseudo labeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv, summary.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set pipeline.alpha=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results.csv into summary.csv.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment label; read from a sibling manifest.json when omitted.
        #[arg(long)]
        experiment: Option<String>,
    },
    /// List the known experiment ids.
    ListExperiments,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<SplError> for Failure {
    fn from(e: SplError) -> Self {
        match e.root() {
            SplError::Config(_) | SplError::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn seed_from_env() -> Result<Option<u64>, Failure> {
    match std::env::var("SPL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Config(format!("SPL_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run(
    config: &Path,
    mut overrides: Vec<String>,
    reps: Option<usize>,
    seed: Option<u64>,
    parallel: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    if let Some(n) = reps {
        overrides.push(format!("n_reps={n}"));
    }
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(p) = parallel {
        overrides.push(format!("parallelism={p}"));
    }
    if let Some(dir) = &out {
        let quoted = serde_json::to_string(dir).map_err(|e| Failure::Config(e.to_string()))?;
        overrides.push(format!("out_dir={quoted}"));
    }
    let cfg = ExperimentConfig::load(config, &overrides, seed_from_env()?)?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    log::info!("running {} into {}", cfg.experiment.name(), dir.display());
    let rows = run_experiment(&cfg)?;
    write_artifacts(&cfg, &rows, &dir)
        .map_err(|e| Failure::Runtime(format!("writing {}: {e}", dir.display())))?;
    println!("{}", dir.join("summary.csv").display());
    Ok(())
}

fn summarize_file(input: &Path, out: &Path, experiment: Option<String>) -> Result<(), Failure> {
    let experiment = match experiment {
        Some(e) => e,
        None => {
            let manifest = input.with_file_name("manifest.json");
            if manifest.exists() {
                Manifest::read(&manifest)?.config.experiment.name().to_string()
            } else {
                ExperimentId::Custom.name().to_string()
            }
        }
    };
    let reader = fs::File::open(input)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", input.display())))?;
    let writer = fs::File::create(out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    summarize(&experiment, reader, writer)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            set,
            reps,
            seed,
            parallel,
            out,
        } => run(&config, set, reps, seed, parallel, out),
        Command::Summarize {
            input,
            out,
            experiment,
        } => summarize_file(&input, &out, experiment),
        Command::ListExperiments => {
            for id in ExperimentId::ALL {
                println!("{:<14} {}", id.name(), id.description());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
