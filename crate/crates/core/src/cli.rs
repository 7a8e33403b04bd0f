//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 invalid or missing
//! scenario, 3 simulation failure (including invariant violations).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use crate::error::SimError;
use crate::page_cache::WritePolicy;
use crate::scenario::{bundled_names, bundled_source, Overrides, Scenario, ScenarioError};
use crate::workload::RunReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SCENARIO: i32 = 2;
pub const EXIT_SIMULATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pagesim", version, about = "Page cache simulator for data-intensive workloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Writeback,
    Writethrough,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its metrics.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        #[arg(long = "pagecache", value_enum)]
        page_cache: Option<OnOff>,
        #[arg(long, value_enum)]
        write_policy: Option<PolicyArg>,
        /// Output directory (default: the scenario's, else results/<name>).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Memory sampling period in seconds.
        #[arg(long)]
        cadence: Option<f64>,
        /// Number of concurrent application instances.
        #[arg(long)]
        instances: Option<usize>,
        /// Do not write metric files.
        #[arg(long)]
        no_export: bool,
    },
    /// Check a scenario without running it.
    Validate { scenario: String },
    /// List bundled scenarios, or print one.
    Bundled { name: Option<String> },
}

enum Failure {
    Scenario(ScenarioError),
    Simulation(SimError),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Scenario(_) => EXIT_SCENARIO,
            Failure::Simulation(_) => EXIT_SIMULATION,
            Failure::Other(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Scenario(e) => write!(f, "{e}"),
            Failure::Simulation(e) => write!(f, "simulation failed: {e}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

fn load(spec: &str) -> Result<Scenario, ScenarioError> {
    let path = Path::new(spec);
    if !path.exists() {
        if bundled_source(spec).is_some() {
            return Scenario::bundled(spec);
        }
    }
    Scenario::load(path)
}

/// Parses `args` (including the program name) and executes the command.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.code()
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Validate { scenario } => {
            load(&scenario).map_err(Failure::Scenario)?;
            writeln!(out, "ok").map_err(|e| Failure::Other(e.into()))?;
            Ok(())
        }
        Command::Bundled { name } => {
            let text = match name {
                None => bundled_names().join("\n") + "\n",
                Some(n) => bundled_source(&n)
                    .ok_or(Failure::Scenario(ScenarioError::UnknownBundled(n)))?
                    .to_string(),
            };
            out.write_all(text.as_bytes()).map_err(|e| Failure::Other(e.into()))?;
            Ok(())
        }
        Command::Run {
            scenario,
            page_cache,
            write_policy,
            output,
            cadence,
            instances,
            no_export,
        } => {
            let mut sc = load(&scenario).map_err(Failure::Scenario)?;
            sc.apply(&Overrides {
                page_cache: page_cache.map(|v| matches!(v, OnOff::On)),
                write_policy: write_policy.map(|p| match p {
                    PolicyArg::Writeback => WritePolicy::Writeback,
                    PolicyArg::Writethrough => WritePolicy::Writethrough,
                }),
                cadence,
                instances,
                output,
            })
            .map_err(Failure::Scenario)?;
            let report = sc.run().map_err(Failure::Simulation)?;
            print_summary(out, &sc, &report).map_err(|e| Failure::Other(e.into()))?;
            if !no_export {
                let dir = sc
                    .output
                    .directory
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("results").join(&sc.name));
                sc.export(&report, &dir)
                    .with_context(|| format!("writing results to {}", dir.display()))
                    .map_err(Failure::Other)?;
                writeln!(out, "results written to {}", dir.display()).map_err(|e| Failure::Other(e.into()))?;
            }
            Ok(())
        }
    }
}

fn print_summary(out: &mut dyn Write, sc: &Scenario, r: &RunReport) -> std::io::Result<()> {
    writeln!(
        out,
        "scenario {} | page cache {} | {:?} | {} instance(s)",
        sc.name,
        if r.page_cache { "on" } else { "off" },
        r.write_policy,
        r.instances
    )?;
    writeln!(out, "{:>8}  {:<24} {:>12} {:>12} {:>12}", "instance", "task", "read (s)", "cpu (s)", "write (s)")?;
    for t in &r.tasks {
        writeln!(
            out,
            "{:>8}  {:<24} {:>12.3} {:>12.3} {:>12.3}",
            t.instance, t.task, t.read, t.compute, t.write
        )?;
    }
    writeln!(out, "makespan {:.3} s", r.makespan.secs())?;
    for h in &r.hosts {
        writeln!(
            out,
            "host {}: flushed {} B (foreground) + {} B (periodic), evicted {} B, cache hits {} B",
            h.name, h.cache.foreground_flushed, h.cache.periodic_flushed, h.cache.evicted, h.cache.hit_bytes
        )?;
    }
    Ok(())
}
