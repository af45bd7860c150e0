use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splaynet::analysis::{summarize, Report};
use splaynet::simulator::{Detectors, LogLevel, RunResult, SimConfig, Termination};
use splaynet::workload::{WorkloadKind, WorkloadSpec};
use splaynet::{NodeId, Tree};
use splaynet_cli::output::{write_csv, write_json};
use splaynet_cli::{all_pairs, parse_list, parse_seeds, verify_pairs, Cell, ExperimentSpec};

/// Concurrent SplayNet simulator.
#[derive(Parser)]
#[command(name = "splaynet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration and write its report (JSON by default).
    Run(RunArgs),
    /// Run the cross product of nodes × requests × workloads × seeds (CSV by default).
    Sweep(SweepArgs),
    /// Check single-splay runs against the parallel reference splay.
    Verify(VerifyArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Log {
    None,
    Events,
}

#[derive(Args)]
struct Shared {
    /// Splays per super-round; a comma list for sweeps [default: n/4 via --requests-frac]
    #[arg(long, conflicts_with = "requests_frac")]
    requests: Option<String>,
    /// Splays per super-round as a fraction of the node count
    #[arg(long, default_value_t = 0.25)]
    requests_frac: f64,
    /// uniform, zipf:<alpha>, product:<file> or trace:<file>; a comma list for sweeps
    #[arg(long, default_value = "uniform")]
    workload: String,
    /// Slot limit [default: 10^4 + 200·m·⌈log₂n⌉·⌈log₂(m+1)⌉]
    #[arg(long)]
    max_timeslots: Option<u64>,
    /// Synchronise endpoints into global rounds
    #[arg(long)]
    lockstep_rounds: bool,
    /// Request batches, each released once the previous one completes
    #[arg(long, default_value_t = 1)]
    super_rounds: u32,
    /// Safety detectors (deadlock, loop window, buffer consistency, tree invariants)
    #[arg(long, value_enum, default_value = "on")]
    detectors: Switch,
    /// Output file [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format [default: json for run, csv for sweep]
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Event log, written to <out>.events (stderr without --out)
    #[arg(long, value_enum, default_value = "none")]
    log: Log,
}

#[derive(Args)]
struct RunArgs {
    /// Number of nodes
    #[arg(long)]
    nodes: usize,
    /// Run seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated node counts
    #[arg(long)]
    nodes: String,
    /// Seeds: a..b (inclusive), a comma list, or one seed
    #[arg(long, default_value = "0")]
    seeds: String,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct VerifyArgs {
    /// Number of nodes of the balanced start tree
    #[arg(long)]
    nodes: usize,
    /// Check every ordered pair
    #[arg(long, conflicts_with = "pairs")]
    exhaustive_pairs: bool,
    /// Check this many random pairs
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    /// Seed for sampling pairs
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn usage(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(clap::error::ErrorKind::ValueValidation, msg).exit()
}

fn workloads(s: &str) -> Vec<WorkloadKind> {
    s.split(',')
        .map(|w| w.trim().parse::<WorkloadKind>().unwrap_or_else(|e| usage(e)))
        .collect()
}

fn requests(shared: &Shared, n: usize) -> Vec<usize> {
    match &shared.requests {
        Some(list) => parse_list(list).unwrap_or_else(|e| usage(format!("--requests: {e}"))),
        None => {
            if !(shared.requests_frac > 0.0) {
                usage("--requests-frac must be positive");
            }
            vec![((n as f64 * shared.requests_frac).round() as usize).max(1)]
        }
    }
}

fn config(shared: &Shared, n: usize, m: usize, kind: WorkloadKind, seed: u64) -> SimConfig {
    let mut c = SimConfig::new(n, WorkloadSpec::new(kind, m), seed);
    c.max_timeslots = shared.max_timeslots;
    c.lockstep = shared.lockstep_rounds;
    c.super_rounds = shared.super_rounds;
    if shared.detectors == Switch::Off {
        c.detectors = Detectors::none();
    }
    if shared.log == Log::Events {
        c.log_level = LogLevel::Events;
    }
    c
}

fn sink(out: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn fired(r: &RunResult) -> bool {
    !matches!(r.termination, Termination::Completed | Termination::Timeout) || !r.loop_violations.is_empty()
}

/// Writes outputs; returns the diagnostics path when a detector fired.
fn emit(shared: &Shared, cells: &[Vec<RunResult>], single: bool) -> io::Result<Option<PathBuf>> {
    let reports: Vec<Vec<Report>> = cells.iter().map(|c| c.iter().map(summarize).collect()).collect();
    let format = shared.format.unwrap_or(if single { Format::Json } else { Format::Csv });
    let mut w = sink(&shared.out)?;
    match format {
        Format::Csv => write_csv(&mut w, &reports).map_err(io::Error::other)?,
        Format::Json if single => write_json(&mut w, &reports[0][0])?,
        Format::Json => write_json(&mut w, &reports.concat())?,
    }
    w.flush()?;

    let runs: Vec<&RunResult> = cells.iter().flatten().collect();
    if shared.log == Log::Events {
        let mut w: Box<dyn Write> = match &shared.out {
            Some(p) => Box::new(BufWriter::new(File::create(with_suffix(p, ".events"))?)),
            None => Box::new(io::stderr().lock()),
        };
        for r in &runs {
            if runs.len() > 1 {
                writeln!(w, "# n={} m={} workload={} seed={}", r.config.n, r.config.workload.m, r.config.workload.kind, r.config.seed)?;
            }
            w.write_all(r.log.to_lines().as_bytes())?;
        }
        w.flush()?;
    }

    let bad: Vec<&&RunResult> = runs.iter().filter(|r| fired(r)).collect();
    if bad.is_empty() {
        return Ok(None);
    }
    let path = match &shared.out {
        Some(p) => with_suffix(p, ".diag"),
        None => PathBuf::from("splaynet.diag"),
    };
    let mut w = BufWriter::new(File::create(&path)?);
    for r in bad {
        writeln!(w, "n={} m={} workload={} seed={}", r.config.n, r.config.workload.m, r.config.workload.kind, r.config.seed)?;
        if let Termination::DetectorFired { detector, slot, detail } = &r.termination {
            writeln!(w, "  {detector} fired at slot {slot}: {detail}")?;
        }
        for v in &r.loop_violations {
            writeln!(
                w,
                "  loop window at slot {}: endpoint {} toward {}, distance {} -> {} from round {}",
                v.slot, v.endpoint, v.peer, v.start_distance, v.end_distance, v.window_start_round
            )?;
        }
    }
    w.flush()?;
    Ok(Some(path))
}

fn finish(shared: &Shared, spec: ExperimentSpec, single: bool) -> ExitCode {
    if let Err(e) = spec.validate() {
        usage(e);
    }
    let cells = match spec.run() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match emit(shared, &cells, single) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(diag)) => {
            eprintln!("detector fired; diagnostics in {}", diag.display());
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run(a) => {
            let ms = requests(&a.shared, a.nodes);
            let ws = workloads(&a.shared.workload);
            if ms.len() != 1 || ws.len() != 1 {
                usage("run takes one --requests value and one --workload; use sweep for lists");
            }
            let cell = Cell {
                config: config(&a.shared, a.nodes, ms[0], ws[0].clone(), a.seed),
                seeds: vec![a.seed],
            };
            finish(&a.shared, ExperimentSpec { cells: vec![cell] }, true)
        }
        Cmd::Sweep(a) => {
            let nodes: Vec<usize> = parse_list(&a.nodes).unwrap_or_else(|e| usage(format!("--nodes: {e}")));
            let seeds = parse_seeds(&a.seeds).unwrap_or_else(|e| usage(format!("--seeds: {e}")));
            let ws = workloads(&a.shared.workload);
            let mut cells = Vec::new();
            for &n in &nodes {
                for m in requests(&a.shared, n) {
                    for w in &ws {
                        cells.push(Cell {
                            config: config(&a.shared, n, m, w.clone(), seeds[0]),
                            seeds: seeds.clone(),
                        });
                    }
                }
            }
            finish(&a.shared, ExperimentSpec { cells }, false)
        }
        Cmd::Verify(a) => {
            let t = Tree::balanced(a.nodes).unwrap_or_else(|e| usage(e));
            let pairs = if a.exhaustive_pairs {
                all_pairs(a.nodes)
            } else {
                if a.nodes < 2 {
                    usage("--nodes must be at least 2");
                }
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                (0..a.pairs)
                    .map(|_| loop {
                        let s = rng.random_range(1..=a.nodes as u32);
                        let d = rng.random_range(1..=a.nodes as u32);
                        if s != d {
                            break (NodeId(s), NodeId(d));
                        }
                    })
                    .collect()
            };
            let out = verify_pairs(&t, &pairs);
            for f in &out.failures {
                println!("FAIL {f}");
            }
            println!(
                "n={} pairs={} passed={} failed={}",
                a.nodes,
                out.pairs,
                out.passed,
                out.failures.len()
            );
            if out.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
