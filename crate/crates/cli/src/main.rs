use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sdedge::runner::{self, RunError};
use sdedge::scenario::Scenario;
use sdedge::sim::metrics::{Format, MetricsReport};
use sdedge::sim::Simulation;

#[derive(Parser, Debug)]
#[command(
    name = "sdedge",
    version,
    about = "Scenario runner for the SDN edge mobility simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and emit its metrics.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to the extension of --out, else csv.
        #[arg(long)]
        format: Option<Format>,
        /// Also write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Parse and validate a scenario, reporting every error.
    Validate { scenario: PathBuf },
    /// Run every `*.scenario` in a directory in parallel.
    Batch {
        dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write `<name>.<format>` per scenario here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
}

/// Exit status for usage errors, matching clap's.
const USAGE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<RunError>().is_some_and(RunError::is_usage);
            ExitCode::from(if usage { USAGE } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            mut set,
            out,
            format,
            trace,
        } => {
            if let Some(s) = seed {
                set.push(format!("seed={s}"));
            }
            let report = run_one(&scenario, &set, trace.as_deref())?;
            match out {
                Some(path) => {
                    let format = format.or_else(|| format_of(&path)).unwrap_or(Format::Csv);
                    report
                        .write(&path, format)
                        .with_context(|| format!("cannot write {}", path.display()))?;
                    print_summary(&report);
                }
                None => match format {
                    Some(f) => print!("{}", report.render(f)),
                    None => print_summary(&report),
                },
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { scenario } => {
            let s = Scenario::from_path(&scenario).map_err(RunError::from)?;
            println!(
                "{}: ok ({} controllers, {} switches, {} APs, {} devices, {} flows, {} groups)",
                scenario.display(),
                s.controllers.len(),
                s.switches.len(),
                s.aps.len(),
                s.md_names().len(),
                s.flows.len() + s.flow_gens.len(),
                s.groups.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch {
            dir,
            set,
            out_dir,
            format,
        } => {
            let items = runner::batch(&dir, &set)?;
            if let Some(d) = &out_dir {
                std::fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
            }
            let mut failed = 0;
            for item in items {
                let name = item.path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                match item.result {
                    Ok(r) => {
                        println!(
                            "{name}: ok, {} events, digest {}",
                            r.summary.events, r.summary.trace_digest
                        );
                        if let Some(d) = &out_dir {
                            let ext = match format {
                                Format::Csv => "csv",
                                Format::Json => "json",
                            };
                            let p = d.join(format!("{name}.{ext}"));
                            r.write(&p, format)
                                .with_context(|| format!("cannot write {}", p.display()))?;
                        }
                    }
                    Err(e) => {
                        failed += 1;
                        println!("{name}: FAILED: {e}");
                    }
                }
            }
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn run_one(path: &Path, set: &[String], trace: Option<&Path>) -> anyhow::Result<MetricsReport> {
    let Some(trace) = trace else {
        return Ok(runner::run_path(path, set)?);
    };
    let mut s = Scenario::from_path(path).map_err(RunError::from)?;
    s.apply_overrides(set).map_err(RunError::from)?;
    let mut sim = Simulation::new(&s).map_err(RunError::from)?;
    let report = sim.run().map_err(RunError::from)?;
    let mut lines = String::new();
    for e in sim.trace() {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    std::fs::write(trace, lines).with_context(|| format!("cannot write {}", trace.display()))?;
    Ok(report)
}

fn format_of(path: &Path) -> Option<Format> {
    path.extension()?.to_str()?.parse().ok()
}

fn print_summary(r: &MetricsReport) {
    let s = &r.summary;
    println!(
        "scenario {} (seed {}, mode {}, {} s)",
        r.scenario, r.seed, r.mode, r.duration
    );
    println!("  events            {}", s.events);
    println!("  streams           {}", r.series.len());
    if let Some(t) = s.mean_throughput {
        println!("  mean throughput   {t} Mbps");
    }
    println!("  handovers         {}", s.handovers);
    if let Some(d) = s.mean_handover_delay {
        println!("  mean handover     {d} s");
    }
    if s.packet_in_processed > 0 {
        println!(
            "  packet-in         {} processed, {}/s",
            s.packet_in_processed, s.packet_in_throughput
        );
    }
    if s.grants + s.denies > 0 {
        println!("  authentication    {} grant(s), {} denial(s)", s.grants, s.denies);
    }
    println!("  record loss       {}", s.record_loss);
    println!("  trace digest      {}", s.trace_digest);
}
