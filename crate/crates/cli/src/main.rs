//! `levy-mlpf` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use levy_mlpf::{Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "levy-mlpf", version, about = "Multilevel particle filters for Levy-driven SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate weak and strong rates of the coupled increments.
    Rates(Common),
    /// Per-step filtering estimates from return data or synthetic observations.
    Filter(Common),
    /// Knock-out barrier option value.
    Barrier(Common),
    /// MSE against cost over an epsilon grid.
    Sweep(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Flat `key = value` file, or a report whose config block is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["pf", "mlpf"])]
    estimator: Option<String>,
    /// Comma-separated accuracy targets.
    #[arg(long, allow_hyphen_values = true)]
    epsilon: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    /// Comma-separated particle counts, level 0 first.
    #[arg(long)]
    particles: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Replace every potential by 1 (filter and sweep).
    #[arg(long)]
    unit_potential: bool,
    #[arg(long)]
    min_level: Option<String>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = match cmd {
        Command::Rates(c) | Command::Filter(c) | Command::Barrier(c) | Command::Sweep(c) => c,
    };
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_text(&commands::read_config(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read config {}: {source}", path.display())),
            other => other,
        })?)?;
    }
    for kv in &common.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("threads", common.threads.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("estimator", common.estimator.clone()),
        ("epsilon", common.epsilon.clone()),
        ("levels", common.levels.clone()),
        ("particles", common.particles.clone()),
        ("data", common.data.as_ref().map(|p| p.display().to_string())),
        ("min_level", common.min_level.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if common.unit_potential {
        cfg.unit_potential = true;
    }
    cfg.validate()?;
    if let Command::Sweep(_) = cmd {
        if cfg.epsilon.is_empty() {
            if common.epsilon.is_some() {
                return Err(Error::Config("epsilon grid is empty".into()));
            }
            cfg.epsilon = commands::default_epsilon_grid(&cfg);
        }
    }
    Ok(cfg)
}

fn run(cmd: &Command) -> Result<String> {
    let cfg = resolve(cmd)?;
    let threads = cfg.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    match cmd {
        Command::Rates(_) => commands::rates(&cfg),
        Command::Filter(_) => commands::filter(&cfg),
        Command::Barrier(_) => commands::barrier(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 1,
        Error::Data { .. } | Error::Io { .. } => 2,
        Error::Degeneracy { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
