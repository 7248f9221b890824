//! `storyvae`: seeded, config-driven pipeline over the story VAE lab.
//!
//! Exit codes: 0 ok, 1 config error, 2 usage, 3 runtime or numeric failure.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "storyvae", version, about = "Multi-task story VAE lab")]
#[command(after_help = "Any config key can also be set through the environment as \
STORYVAE_<SECTION>_<KEY> (for example STORYVAE_TRAIN_EPOCHS=5) or STORYVAE_<KEY> for \
top-level keys. Precedence: flag > environment > config file > default.")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus as train/test JSON lines.
    Synth,
    /// Fit LDA on the training split.
    Lda,
    /// Write one labeled negative per training story.
    Negatives,
    /// Train the VAE and write a checkpoint, vocabulary and epoch log.
    Train(TrainArgs),
    /// Sample stories from the prior with top-p decoding.
    Generate(SampleArgs),
    /// IW perplexity, active units and sequence repetition on the test split.
    Eval(EvalArgs),
    /// Quality-diversity sweep over the nucleus mass.
    Sweep(SampleCountArgs),
    /// Topic probe on mu and z, and held-out discourse separation.
    Probe,
    /// Finite-difference check of every op and the composed objective.
    GradCheck,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// KL target C in nats.
    #[arg(long)]
    c_target: Option<f64>,
    /// Topic loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Discourse loss weight.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = ["prepend", "memory"])]
    injection: Option<String>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Nucleus mass.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Importance samples per story.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    sample: SampleArgs,
}

#[derive(Debug, Args)]
struct SampleCountArgs {
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Debug)]
pub enum Failure {
    Config { field: String, message: String },
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config { .. } => 1,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config { field, message } => write!(f, "config error at {field}: {message}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<storyvae_core::Error> for Failure {
    fn from(e: storyvae_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<storyvae_numerics::NumericsError> for Failure {
    fn from(e: storyvae_numerics::NumericsError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn flag_overrides(cli: &Cli) -> Vec<(&'static str, Value)> {
    let mut flags: Vec<(&'static str, Value)> = Vec::new();
    let mut int = |key, v: Option<u64>| {
        if let Some(v) = v {
            flags.push((key, Value::Integer(v as i64)));
        }
    };
    int("seed", cli.global.seed);
    int("jobs", cli.global.jobs.map(|j| j as u64));
    match &cli.command {
        Command::Eval(a) => {
            int("eval.k", a.k.map(|k| k as u64));
            int("eval.n_samples", a.sample.n_samples.map(|n| n as u64));
        }
        Command::Generate(a) => int("eval.n_samples", a.n_samples.map(|n| n as u64)),
        Command::Sweep(a) => int("eval.n_samples", a.n_samples.map(|n| n as u64)),
        _ => {}
    }
    if let Some(out) = &cli.global.out {
        flags.push(("out", Value::String(out.display().to_string())));
    }
    let p = match &cli.command {
        Command::Eval(a) => a.sample.p,
        Command::Generate(a) => a.p,
        _ => None,
    };
    if let Some(p) = p {
        flags.push(("eval.p", Value::Float(p)));
    }
    if let Command::Train(a) = &cli.command {
        for (key, v) in [("train.c_target", a.c_target), ("train.alpha", a.alpha), ("train.gamma", a.gamma)] {
            if let Some(v) = v {
                flags.push((key, Value::Float(v)));
            }
        }
        if let Some(inj) = &a.injection {
            flags.push(("model.injection", Value::String(inj.clone())));
        }
    }
    flags
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let flags = flag_overrides(cli);
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), std::env::vars(), &flags)?;
    let name = match cli.command {
        Command::Synth => "synth",
        Command::Lda => "lda",
        Command::Negatives => "negatives",
        Command::Train(_) => "train",
        Command::Generate(_) => "generate",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::Probe => "probe",
        Command::GradCheck => "grad-check",
    };
    let mut run = output::Run::start(name, cfg)?;
    let result = match cli.command {
        Command::Synth => commands::synth(&mut run),
        Command::Lda => commands::lda(&mut run),
        Command::Negatives => commands::negatives(&mut run),
        Command::Train(_) => commands::train(&mut run),
        Command::Generate(_) => commands::generate(&mut run),
        Command::Eval(_) => commands::eval(&mut run),
        Command::Sweep(_) => commands::sweep(&mut run),
        Command::Probe => commands::probe(&mut run),
        Command::GradCheck => commands::grad_check(&mut run),
    };
    run.finish(result.as_ref().err())?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
