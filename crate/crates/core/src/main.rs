use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use meshcast::harness::{self, Axis};
use meshcast::protocol::Variant;
use meshcast::scenario::Scenario;
use meshcast::sim::{csv_document, run_scenario, SimOptions};

#[derive(Parser)]
#[command(name = "sim", version, about = "Mesh multicast routing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and print its CSV row.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the packet trace to stdout.
        #[arg(long)]
        trace: bool,
    },
    /// Run a parameter sweep for every variant.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds 1..=N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in oracle scenario.
    Oracle {
        name: OracleName,
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleName {
    Line5,
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<(), String> {
    match out {
        Some(p) => fs::write(&p, text).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn real_main() -> Result<(), String> {
    match Cli::parse().cmd {
        Cmd::Run {
            config,
            seed,
            variant,
            out,
            trace,
        } => {
            let mut s = Scenario::load(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(v) = variant {
                s.variant = v;
            }
            let o = run_scenario(s, SimOptions { trace, ..SimOptions::default() }).map_err(|e| e.to_string())?;
            if trace {
                print!("{}", o.trace);
            }
            emit(out, &csv_document(&[o.summary]))
        }
        Cmd::Sweep {
            config,
            axis,
            values,
            seeds,
            out,
        } => {
            let base = Scenario::load(&config).map_err(|e| e.to_string())?;
            let seeds: Vec<u64> = (1..=seeds).collect();
            let rows = harness::sweep(&base, axis, &values, &seeds, &Variant::ALL).map_err(|e| e.to_string())?;
            emit(out, &csv_document(&rows))
        }
        Cmd::Oracle { name, trace } => {
            let s = match name {
                OracleName::Line5 => Scenario::line5(),
            };
            let o = run_scenario(s, SimOptions { trace, ..SimOptions::default() }).map_err(|e| e.to_string())?;
            if trace {
                print!("{}", o.trace);
            }
            emit(None, &csv_document(&[o.summary]))
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
