//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime or connection failure,
//! 3 when the only failure is that nothing was sustainable.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::adapter::remote;
use crate::config::{BenchConfig, ConfigError};
use crate::driver::{DriverError, Probe};
use crate::engine::ReferenceEngine;
use crate::report::{self, ReportError, SuiteReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_UNSUSTAINABLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "streamgauge", version, about = "Latency and sustainable-throughput benchmarks for stream processors")]
pub struct Cli {
    /// Log filter, e.g. `info` or `streamgauge=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full suite described by a config file.
    Run { config: PathBuf },
    /// Search for the maximum sustainable throughput.
    FindMst {
        config: PathBuf,
        /// Upper bound of the search, events per second.
        #[arg(long)]
        hi: Option<f64>,
        /// Relative width at which the search stops.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Write latency tables and plot data for an artifact directory.
    Report { dir: PathBuf },
    /// Serve the reference engine to a remote-mode driver.
    Serve {
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
}

pub fn main_with(cli: Cli) -> ExitCode {
    let _ = env_logger::Builder::new().parse_filters(&cli.log).try_init();
    let code = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::FindMst { config, hi, tol } => cmd_find_mst(&config, hi, tol),
        Command::Report { dir } => cmd_report(&dir),
        Command::Serve { config, listen } => cmd_serve(&config, &listen),
    };
    ExitCode::from(code)
}

fn load(path: &PathBuf) -> Result<BenchConfig, u8> {
    BenchConfig::load(path).map_err(|e| {
        match &e {
            ConfigError::Io { .. } | ConfigError::Parse(_) => eprintln!("error: {e}"),
            ConfigError::Invalid(inner) => eprintln!("error: invalid config {}: {inner}", path.display()),
        }
        EXIT_INVALID
    })
}

fn driver_failure(e: &DriverError) -> u8 {
    eprintln!("error: {e}");
    match e {
        DriverError::NothingSustainable { probes } => {
            print_probes(probes);
            EXIT_UNSUSTAINABLE
        }
        e if e.is_runtime() => EXIT_RUNTIME,
        _ => EXIT_INVALID,
    }
}

fn print_probes(probes: &[Probe]) {
    for p in probes {
        eprintln!("  probe {:>12.0} events/s: {:?}", p.rate, p.verdict.reason);
    }
}

pub fn cmd_run(path: &PathBuf) -> u8 {
    let config = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let started_at = chrono::Local::now().to_rfc3339();
    let mut driver = config.driver();
    let suite = match driver.run_suite(&config.suite_plan()) {
        Ok(s) => s,
        Err(e) => return driver_failure(&e),
    };
    let report = SuiteReport::new(&config.name, config.query, config.window, started_at, &suite);
    let dir = match report::write_artifacts(&config.output_dir, &report, &suite.runs) {
        Ok(dir) => dir,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    println!("artifacts: {}", dir.display());
    if let Some(reason) = &suite.halted {
        eprintln!("error: experiment halted, {reason}; no latency report");
        return EXIT_RUNTIME;
    }
    match report::generate(&dir) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    }
    EXIT_OK
}

pub fn cmd_find_mst(path: &PathBuf, hi: Option<f64>, tol: Option<f64>) -> u8 {
    let mut config = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(hi) = hi {
        config.search.hi = hi;
    }
    if let Some(tol) = tol {
        config.search.tol = tol;
    }
    if let Err(e) = config.search_plan().validate() {
        eprintln!("error: {e}");
        return EXIT_INVALID;
    }
    let mut driver = config.driver();
    match driver.find_mst(&config.search_plan()) {
        Ok(result) => {
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            for p in &result.probes {
                println!("probe {:.0} events/s: {:?}", p.rate, p.verdict.reason);
            }
            println!("mst {:.0} events/s", result.mst);
            EXIT_OK
        }
        Err(e) => driver_failure(&e),
    }
}

pub fn cmd_report(dir: &PathBuf) -> u8 {
    match report::generate(dir) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e @ ReportError::MissingArtifacts(_)) | Err(e @ ReportError::Malformed { .. }) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn cmd_serve(path: &PathBuf, listen: &str) -> u8 {
    let config = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let listener = match TcpListener::bind(listen) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot listen on {listen}: {e}");
            return EXIT_RUNTIME;
        }
    };
    eprintln!("serving {} on {listen}", config.query);
    let engine = ReferenceEngine::new(config.engine_config());
    match remote::serve(listener, &engine) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
