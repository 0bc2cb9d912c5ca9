use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nncluster::harness::{
    bench, run_cycles, trace_worked_example, verify, write_cycles_csv, Mode, RunConfig, RunReport,
};
use nncluster::parcels::{io, sample_artificial};
use nncluster::{Error, Schedule};

#[derive(Parser)]
#[command(version, about = "Cluster and merge small parcels on a decomposed grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a population and write it as a PCLS snapshot
    Gen {
        #[command(flatten)]
        flags: Flags,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run merge cycles
    Run(Flags),
    /// Check the engine against the serial oracle
    Verify(Flags),
    /// Run cycles and print n-way statistics
    Stats(Flags),
    /// Time the sequential and parallel schedules
    Bench(Flags),
    /// Replay the labelled twelve-parcel example
    Trace(Flags),
}

/// Every flag mirrors a configuration key and overrides `--config`.
#[derive(Args)]
struct Flags {
    /// Read `key = value` settings from a file first
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    extent: Option<String>,
    #[arg(long)]
    origin: Option<String>,
    #[arg(long)]
    cells: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    parcels_per_cell: Option<String>,
    #[arg(long)]
    cycles: Option<String>,
    #[arg(long)]
    configs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// sequential | reverse | shuffled:N | parallel
    #[arg(long)]
    schedule: Option<String>,
    /// lower-gid | lower-rank | higher-gid
    #[arg(long)]
    tie_break: Option<String>,
    #[arg(long)]
    checking: bool,
    /// Replay a PCLS snapshot instead of sampling
    #[arg(long)]
    input: Option<String>,
    /// JSON report path
    #[arg(long)]
    report: Option<String>,
    /// Per-cycle CSV path
    #[arg(long)]
    csv: Option<String>,
}

impl Flags {
    fn resolve(&self, mode: Mode) -> nncluster::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        c.mode = mode;
        let pairs = [
            ("extent", &self.extent),
            ("origin", &self.origin),
            ("cells", &self.cells),
            ("workers", &self.workers),
            ("parcels_per_cell", &self.parcels_per_cell),
            ("cycles", &self.cycles),
            ("configs", &self.configs),
            ("seed", &self.seed),
            ("schedule", &self.schedule),
            ("tie_break", &self.tie_break),
            ("input", &self.input),
            ("report", &self.report),
            ("csv", &self.csv),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                c.set(key, v)?;
            }
        }
        if self.checking {
            c.checking = true;
        }
        c.validate()?;
        Ok(c)
    }
}

enum Outcome {
    Done,
    Mismatch,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> nncluster::Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn cycles(config: &RunConfig, stats: bool) -> nncluster::Result<Outcome> {
    let reports = run_cycles(config)?;
    if let Some(path) = &config.csv {
        write_cycles_csv(File::create(path)?, &reports)?;
    }
    let report = RunReport::new(config, reports)?;
    if let Some(path) = &config.report {
        report.write_json(path)?;
    }
    for r in &report.cycles {
        println!(
            "cycle {}: {} -> {} parcels ({:.4} reduction), {} small, {} iterations",
            r.cycle, r.n_before, r.n_after, r.reduction, r.n_small, r.n_iterations
        );
    }
    let s = &report.counters;
    println!(
        "counters: {} barriers = 3 x {} all-reduces + 2 x {} resolve calls",
        s.barriers, s.allreduces, s.resolve_calls
    );
    println!("mean reduction {:.4}", report.mean_reduction);
    if stats {
        let clusters: u64 = report.histogram.values().sum();
        for (n, count) in &report.histogram {
            println!(
                "{n}-way: {count} ({:.4})",
                *count as f64 / clusters.max(1) as f64
            );
        }
    }
    Ok(Outcome::Done)
}

fn execute(command: Command) -> nncluster::Result<Outcome> {
    match command {
        Command::Gen { flags, output } => {
            let c = flags.resolve(Mode::Cycles)?;
            let pop: Vec<_> = sample_artificial(&c.domain()?, c.parcels_per_cell, c.seed)?
                .parcels()
                .collect();
            io::write_snapshot(BufWriter::new(File::create(&output)?), &pop)?;
            println!("wrote {} parcels to {}", pop.len(), output.display());
            Ok(Outcome::Done)
        }
        Command::Run(flags) => cycles(&flags.resolve(Mode::Cycles)?, false),
        Command::Stats(flags) => cycles(&flags.resolve(Mode::Stats)?, true),
        Command::Verify(flags) => {
            let c = flags.resolve(Mode::Verify)?;
            let summary = verify(&c)?;
            if let Some(w) = &summary.warning {
                eprintln!("warning: {w}");
            }
            println!("{}", summary.message());
            let artefact = c
                .report
                .clone()
                .or_else(|| summary.mismatch.as_ref().map(|_| "mismatch.json".into()));
            if let Some(path) = artefact {
                write_json(&path, &summary)?;
            }
            Ok(if summary.passed() {
                Outcome::Done
            } else {
                Outcome::Mismatch
            })
        }
        Command::Bench(flags) => {
            let c = flags.resolve(Mode::Bench)?;
            let mut out = Vec::new();
            for schedule in [Schedule::Sequential, Schedule::Parallel] {
                let b = bench(&c, schedule)?;
                println!(
                    "{:?}: {} workers, {} cycles in {:.3} s ({:.0} parcels/s)",
                    b.schedule, b.workers, b.cycles, b.seconds, b.parcels_per_second
                );
                out.push(b);
            }
            if let Some(path) = &c.report {
                write_json(path, &out)?;
            }
            Ok(Outcome::Done)
        }
        Command::Trace(flags) => {
            let c = flags.resolve(Mode::Trace)?;
            let t = trace_worked_example(c.primary_workers(), c.engine_options())?;
            for line in &t.lines {
                println!("{line}");
            }
            for g in &t.partition.groups {
                let members: String = g.members.iter().map(|&m| nncluster::fixtures::label(m)).collect();
                println!("group {}: {members}", nncluster::fixtures::label(g.root));
            }
            if let Some(path) = &c.report {
                write_json(path, &t)?;
            }
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Mismatch) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::InvalidInput(_) | Error::Format(_) | Error::Io(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
