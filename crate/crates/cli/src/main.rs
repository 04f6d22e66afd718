use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vas_core::config::{load_config, ExperimentConfig};
use vas_core::dataset::read_dataset;
use vas_core::eval::{Intervention, Method};
use vas_core::pipeline;
use vas_core::train::EpochLog;
use vas_core::tta::TtaMode;
use vas_core::VasError;

/// Visual active search: data generation, training, evaluation and test-time adaptation.
#[derive(Parser)]
#[command(name = "vas", version)]
struct Cli {
    /// Experiment config (JSON or key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test (and shifted) task sets.
    Gen,
    /// Train the configured methods on a task set.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate trained methods on a task set.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Restrict to these methods (repeatable).
        #[arg(long = "method")]
        methods: Vec<String>,
    },
    /// Run the class-shift protocol with test-time adaptation.
    Adapt {
        /// Unshifted test tasks.
        #[arg(long)]
        data: PathBuf,
        /// Shifted test tasks.
        #[arg(long)]
        shifted: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Restrict to these adaptation modes (repeatable).
        #[arg(long = "mode")]
        modes: Vec<String>,
    },
    /// Export heatmaps, saliency and sensitivity traces.
    Trace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        intervention: Option<String>,
    },
    /// Generate, train and evaluate every configured method.
    Compare,
}

fn progress(method: Method, e: &EpochLog) {
    if e.epoch.is_multiple_of(50) {
        eprintln!(
            "{method} epoch {}: utility {:.3} esr {:.3}",
            e.epoch, e.mean_utility, e.mean_esr
        );
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig, VasError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), VasError> {
    let mut cfg = config(cli)?;
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Gen => {
            let paths = pipeline::generate_data(&cfg, out)?;
            println!("train: {}", paths.train.display());
            println!("test: {}", paths.test.display());
            if let Some(p) = paths.shifted {
                println!("shifted: {}", p.display());
            }
        }
        Command::Train { data } => {
            let train = read_dataset(data)?;
            pipeline::train_models(&cfg, &train, out, progress)?;
            println!("models written to {}", out.display());
        }
        Command::Eval {
            data,
            model,
            methods,
        } => {
            if !methods.is_empty() {
                cfg.methods = methods
                    .iter()
                    .map(|m| m.parse())
                    .collect::<Result<_, _>>()?;
            }
            let test = read_dataset(data)?;
            let ttt = cfg.tta.mode == TtaMode::Ttt;
            let models = pipeline::load_models(model, &cfg.methods, ttt)?;
            let eval = pipeline::run_eval(&cfg, &models, &test, out)?;
            print!("{}", eval.table.to_csv());
        }
        Command::Adapt {
            data,
            shifted,
            model,
            modes,
        } => {
            if !modes.is_empty() {
                cfg.tta_modes = modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
            }
            let unshifted = read_dataset(data)?;
            let shifted = read_dataset(shifted)?;
            let ttt = cfg.tta_modes.contains(&TtaMode::Ttt);
            let models = pipeline::load_models(model, &[Method::Vas], ttt)?;
            let table = pipeline::run_adapt(&cfg, &models, &unshifted, &shifted, out)?;
            print!("{}", table.to_csv());
        }
        Command::Trace {
            data,
            model,
            intervention,
        } => {
            if let Some(i) = intervention {
                cfg.intervention = i.parse::<Intervention>()?;
            }
            let test = read_dataset(data)?;
            let models = pipeline::load_models(model, &[Method::Vas], false)?;
            pipeline::run_trace(&cfg, models.policy(Method::Vas)?, &test, out)?;
            println!("traces written to {}", out.display());
        }
        Command::Compare => {
            let eval = pipeline::compare(&cfg, out, progress)?;
            print!("{}", eval.table.to_csv());
        }
    }
    Ok(())
}

fn exit_code(e: &VasError) -> u8 {
    if e.is_data_error() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
