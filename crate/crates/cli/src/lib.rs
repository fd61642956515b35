//! Command-line entry point for the look-alike pipeline.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod serve;

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ralm",
    version,
    about = "Look-alike audience extension: train, evaluate and serve"
)]
pub struct Cli {
    /// key = value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// RNG seed shared by every stage
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train the user representation tower
    TrainRep(TrainRepArgs),
    /// Train the look-alike model on universal embeddings
    TrainLookalike(TrainLookalikeArgs),
    /// Evaluate the look-alike model on held-out users
    Eval(EvalArgs),
    /// Serve the scoring API over HTTP
    Serve(ServeArgs),
    /// Replay an event log through the serving engine
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub fields: Option<usize>,
    /// Output directory (data_dir)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRepArgs {
    /// attention or concat
    #[arg(long)]
    pub merge: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainLookalikeArgs {
    /// attention or average
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub cluster_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated prec@K cut-offs
    #[arg(long)]
    pub ks: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address, e.g. 127.0.0.1:8080
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Simulated seconds per wall second; 0 disables pacing
    #[arg(long)]
    pub speed: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn push<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key.to_string(), v.to_string()));
    }
}

fn path(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

impl Cli {
    /// Flag values as config overrides.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut f = Vec::new();
        push(&mut f, "seed", self.seed);
        match &self.command {
            Command::Gen(a) => {
                push(&mut f, "users", a.users);
                push(&mut f, "items", a.items);
                push(&mut f, "fields", a.fields);
                push(&mut f, "data_dir", path(a.out.clone()));
            }
            Command::TrainRep(a) => {
                push(&mut f, "merge", a.merge.clone());
                push(&mut f, "rep_epochs", a.epochs);
            }
            Command::TrainLookalike(a) => {
                push(&mut f, "pooling", a.pooling.clone());
                push(&mut f, "lookalike_epochs", a.epochs);
                push(&mut f, "cluster_k", a.cluster_k);
            }
            Command::Eval(a) => push(&mut f, "eval_ks", a.ks.clone()),
            Command::Serve(a) => push(&mut f, "bind", a.bind.clone()),
            Command::Replay(a) => {
                push(&mut f, "events_path", path(a.events.clone()));
                push(&mut f, "replay_speed", a.speed);
                push(&mut f, "replay_report_path", path(a.report.clone()));
            }
        }
        f
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<ralm::Error>(), Some(ralm::Error::Config(_)))
}

/// Parses `args` and runs one command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::resolve(cli.config.as_deref(), &cli.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = match &cli.command {
        Command::Gen(_) => commands::gen(&cfg),
        Command::TrainRep(_) => commands::train_rep(&cfg),
        Command::TrainLookalike(_) => commands::train_lookalike(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Serve(_) => serve::serve(&cfg),
        Command::Replay(_) => commands::replay(&cfg),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
