//! `amoe` command-line driver.
//!
//! Exit codes: `0` success, `1` runtime failure, `2` usage or configuration
//! error, `3` gradient check failed. Errors are printed to stderr as a single
//! JSON line `{"error":"<kind>","message":"..."}`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    GradcheckFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::GradcheckFailed(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Runtime(_) => "runtime",
            CliError::Config(_) => "config",
            CliError::GradcheckFailed(_) => "gradcheck",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::GradcheckFailed(m) => m,
        }
    }
}

impl From<amoe_core::Error> for CliError {
    fn from(e: amoe_core::Error) -> Self {
        let msg = config::one_line(&e.to_string());
        match e {
            amoe_core::Error::Config(_) => CliError::Config(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(config::one_line(&e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "amoe", version, about = "Mixture-of-experts anomaly detection on patch features")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.optimizer.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long, short, env = "AMOE_OUT", default_value = "amoe-out", global = true)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature dataset.
    GenSynth(commands::GenSynthArgs),
    /// Train a model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Compare analytic and numerical gradients on a tiny model.
    Gradcheck(commands::GradcheckArgs),
    /// Score test samples and optionally dump anomaly maps.
    Infer(commands::InferArgs),
    /// Evaluate a checkpoint and write AUROC reports.
    Eval(commands::EvalArgs),
    /// Train and evaluate over a hyperparameter grid.
    Sweep(commands::SweepArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report(&CliError::Config(config::one_line(&e.to_string())));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "message": e.message() });
    eprintln!("{line}");
    ExitCode::from(e.code())
}
