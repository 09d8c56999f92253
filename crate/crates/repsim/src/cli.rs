//! Command-line front end: `run`, `batch` and `replay`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::engine::{self, RunOptions};
use crate::metrics::compute_metrics;
use crate::output::{aggregate, write_run};
use crate::scenario::{Scenario, ScenarioError};
use crate::trace::{digest_bytes, parse_trace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "repsim",
    version,
    about = "Reputation IDS simulator for ad hoc networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's ids_enabled.
        #[arg(long, value_enum)]
        ids: Option<Toggle>,
        /// Write trace.jsonl (the digest is written either way).
        #[arg(long, value_enum, default_value = "on")]
        trace: Toggle,
    },
    /// Run one scenario over a seed range (`a..b`, inclusive) in parallel.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_seed_range)]
        seeds: (u64, u64),
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ids: Option<Toggle>,
        #[arg(long, value_enum, default_value = "off")]
        trace: Toggle,
    },
    /// Recompute metrics and digest from a trace file.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Directory for metrics.json and digest.txt; defaults to the trace's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a..b, got `{s}`"))?;
    let a: u64 = a
        .trim()
        .parse()
        .map_err(|e| format!("bad start seed: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad end seed: {e}"))?;
    if b < a {
        return Err("end seed must be >= start seed".into());
    }
    Ok((a, b))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ScenarioError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load(path: &Path, seed: Option<u64>, ids: Option<Toggle>) -> Result<Scenario, CliError> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(ids) = ids {
        s.ids_enabled = ids.on();
    }
    Ok(s)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            ids,
            trace,
        } => {
            let s = load(&scenario, seed, ids)?;
            let run = engine::run(
                &s,
                RunOptions {
                    keep_trace_text: trace.on(),
                },
            )?;
            write_run(&out, &run).map_err(runtime)?;
            log::info!("{} seed {}: digest {}", s.scenario_id, s.seed, run.digest);
            println!("{}", run.digest);
            Ok(())
        }
        Command::Batch {
            scenario,
            seeds,
            out,
            ids,
            trace,
        } => {
            let base = load(&scenario, None, ids)?;
            let results: Vec<_> = (seeds.0..=seeds.1)
                .into_par_iter()
                .map(|seed| {
                    let mut s = base.clone();
                    s.seed = seed;
                    let run = engine::run(
                        &s,
                        RunOptions {
                            keep_trace_text: trace.on(),
                        },
                    )?;
                    write_run(&out.join(format!("seed-{seed}")), &run).map_err(runtime)?;
                    Ok::<_, CliError>(run.metrics)
                })
                .collect();
            let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            let agg = aggregate(&reports);
            let mut text = serde_json::to_string_pretty(&agg).map_err(runtime)?;
            text.push('\n');
            fs::write(out.join("aggregate.json"), &text).map_err(runtime)?;
            print!("{text}");
            Ok(())
        }
        Command::Replay { trace, out } => {
            let bytes = fs::read(&trace).map_err(runtime)?;
            let text = String::from_utf8(bytes).map_err(runtime)?;
            let records = parse_trace(&text).map_err(runtime)?;
            let metrics = compute_metrics(&records).map_err(runtime)?;
            let digest = digest_bytes(text.as_bytes());
            let dir = out.unwrap_or_else(|| {
                trace
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            fs::create_dir_all(&dir).map_err(runtime)?;
            fs::write(dir.join("metrics.json"), metrics.to_json()).map_err(runtime)?;
            fs::write(dir.join("digest.txt"), format!("{digest}\n")).map_err(runtime)?;
            println!("{digest}");
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("REPSIM_LOG_LEVEL", "error");
    let _ = env_logger::Builder::from_env(env).try_init();
}
