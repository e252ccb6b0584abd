//! `canopy`: run missions, replay and analyze telemetry, superpose routes and
//! probe remote policy servers.

mod config;
mod svg;

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use canopy_sim::metrics::{format_table, summarize, summarize_log, superpose_logs, BehaviourThresholds, MissionSummary};
use canopy_sim::mission::telemetry::{read_log, TelemetryLog};
use canopy_sim::mission::world::World;
use canopy_sim::mission::{run_mission_in, MissionConfig};
use canopy_sim::policy::{serve_check, PolicyKind};

/// Logs with a larger share of unparseable lines fail `analyze`.
const MAX_CORRUPT_FRACTION: f64 = 0.01;

#[derive(Parser)]
#[command(name = "canopy", version, about = "Quadrotor mission simulator and telemetry tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct MissionArgs {
    /// Mission config (JSON). Defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Mission seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed range, `A..B` (exclusive) or `A..=B`, flown in parallel.
    #[arg(long, value_parser = parse_seed_range)]
    seeds: Option<RangeInclusive<u64>>,
    /// Config override, `dotted.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fly a mission and write its telemetry and summary.
    Run(MissionArgs),
    /// Fly the policy outputs recorded in a log again.
    Replay {
        log: PathBuf,
        #[command(flatten)]
        mission: MissionArgs,
    },
    /// Summarize logs as a table and per-log JSON.
    Analyze {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Directory for the summaries.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Behaviour thresholds (JSON).
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Superpose the routes of two or more logs on one grid.
    Superpose {
        #[arg(required = true, num_args = 2..)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        cell_size: f64,
    },
    /// Send one canonical request to a policy server and validate the reply.
    ServeCheck {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        port: u16,
        /// Seconds.
        #[arg(long, default_value_t = 1.0)]
        timeout: f64,
    },
}

fn parse_seed_range(s: &str) -> Result<RangeInclusive<u64>, String> {
    let bad = || format!("expected A..B or A..=B, got {s:?}");
    let (a, b, inclusive) = match s.split_once("..=") {
        Some((a, b)) => (a, b, true),
        None => {
            let (a, b) = s.split_once("..").ok_or_else(bad)?;
            (a, b, false)
        }
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    let end = if inclusive { Some(b) } else { b.checked_sub(1) };
    match end {
        Some(end) if end >= a => Ok(a..=end),
        _ => Err(format!("seed range {s:?} is empty")),
    }
}

/// How a subcommand ended.
enum Outcome {
    Ok,
    /// Reported problems with the inputs; exit 1.
    Failed,
    /// A mission stopped early; exit 2.
    Aborted,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.exit_code() == 0 => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args, None),
        Command::Replay { log, mission } => cmd_run(&mission, Some(&log)),
        Command::Analyze { logs, out, thresholds } => cmd_analyze(&logs, &out, thresholds.as_deref()),
        Command::Superpose { logs, out, cell_size } => cmd_superpose(&logs, &out, cell_size),
        Command::ServeCheck { host, port, timeout } => cmd_serve_check(&host, port, timeout),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Ok(Outcome::Aborted) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "log".into(), |s| s.to_string_lossy().into_owned())
}

fn mission_config(args: &MissionArgs, replay: Option<&Path>) -> Result<MissionConfig> {
    let mut cfg = config::load(args.config.as_deref(), &args.overrides)?;
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(log) = replay {
        let recorded = read_log(log).with_context(|| format!("cannot read {}", log.display()))?;
        if recorded.records.is_empty() {
            bail!("{} has no records to replay", log.display());
        }
        if args.iterations.is_none() && !args.overrides.iter().any(|o| o.starts_with("iterations=")) {
            cfg.iterations = recorded.records.len() as u64;
        }
        cfg.policy = PolicyKind::Replay { path: log.to_owned() };
    }
    cfg.validate().map_err(|e| anyhow!("config: {e}"))?;
    Ok(cfg)
}

struct Flown {
    seed: u64,
    summary: MissionSummary,
    aborted: bool,
}

fn fly(cfg: &MissionConfig, world: &World, out: &Path, name: &str) -> Result<Flown> {
    let outcome = run_mission_in(cfg, world).map_err(|e| anyhow!("seed {}: {e}", cfg.seed))?;
    let log_path = out.join(format!("{name}.jsonl"));
    let file = fs::File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?;
    outcome.write(std::io::BufWriter::new(file))?;
    let summary = summarize(&outcome.records, cfg.dt, outcome.aborted(), &BehaviourThresholds::default());
    write_json(&out.join(format!("{name}.summary.json")), &summary)?;
    if let Some(f) = &outcome.fault {
        eprintln!("seed {}: aborted at iteration {} ({}): {}", cfg.seed, f.iteration, f.cause, f.message);
    }
    Ok(Flown {
        seed: cfg.seed,
        summary,
        aborted: outcome.aborted(),
    })
}

fn cmd_run(args: &MissionArgs, replay: Option<&Path>) -> Result<Outcome> {
    let cfg = mission_config(args, replay)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    // The world seed is independent of the mission seed, so one build
    // serves every seed.
    let world = cfg.world.build().map_err(|e| anyhow!("world: {e}"))?;
    let prefix = match replay {
        Some(log) => format!("replay_{}", file_stem(log)),
        None => "mission".into(),
    };
    let seeds: Vec<u64> = match &args.seeds {
        Some(r) => r.clone().collect(),
        None => vec![cfg.seed],
    };

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let mut c = cfg.clone();
                c.seed = seed;
                let r = fly(&c, &world, &args.out, &format!("{prefix}_seed{seed}"));
                results.lock().expect("no worker panics while holding the lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    results.sort_by_key(|(i, _)| *i);

    let mut rows = Vec::new();
    let mut aborted = false;
    for (_, r) in results {
        let f = r?;
        aborted |= f.aborted;
        rows.push((format!("seed {}", f.seed), f.summary));
    }
    print!("{}", format_table(&rows));
    Ok(if aborted { Outcome::Aborted } else { Outcome::Ok })
}

fn cmd_analyze(logs: &[PathBuf], out: &Path, thresholds: Option<&Path>) -> Result<Outcome> {
    let th = match thresholds {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| anyhow!("{}:{}:{}: {e}", p.display(), e.line(), e.column()))?
        }
        None => BehaviourThresholds::default(),
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut rows = Vec::new();
    let mut failed = false;
    for path in logs {
        let log = match read_log(path) {
            Ok(l) => l,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed = true;
                continue;
            }
        };
        if log.records.is_empty() {
            eprintln!("{}: no telemetry records", path.display());
            failed = true;
            continue;
        }
        if log.corrupt_fraction() > MAX_CORRUPT_FRACTION {
            eprintln!(
                "{}: {} of {} lines corrupt",
                path.display(),
                log.corrupt_lines,
                log.total_lines
            );
            failed = true;
        }
        let summary = summarize_log(&log, MissionConfig::default().dt, &th);
        write_json(&out.join(format!("{}.summary.json", file_stem(path))), &summary)?;
        rows.push((file_stem(path), summary));
    }
    if !rows.is_empty() {
        print!("{}", format_table(&rows));
    }
    Ok(if failed { Outcome::Failed } else { Outcome::Ok })
}

#[derive(Serialize)]
struct SuperposeReport {
    consistency: f64,
    runs: usize,
    cell_size: f64,
    rows: usize,
    cols: usize,
    /// N, E of the grid corner, m.
    origin: [f64; 2],
    logs: Vec<String>,
}

fn cmd_superpose(paths: &[PathBuf], out: &Path, cell_size: f64) -> Result<Outcome> {
    if paths.len() < 2 {
        bail!("superpose needs at least two logs");
    }
    let logs: Vec<TelemetryLog> = paths
        .iter()
        .map(|p| read_log(p).with_context(|| format!("cannot read {}", p.display())))
        .collect::<Result<_>>()?;
    let s = superpose_logs(&logs, cell_size)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("occupancy.csv"), s.grid.to_csv())?;
    let title = format!("{} runs, consistency {:.3}", s.runs, s.consistency);
    fs::write(out.join("occupancy.svg"), svg::heatmap(&s.grid, s.runs, &title))?;
    write_json(
        &out.join("superpose.json"),
        &SuperposeReport {
            consistency: s.consistency,
            runs: s.runs,
            cell_size,
            rows: s.grid.rows(),
            cols: s.grid.cols(),
            origin: [s.grid.origin.x, s.grid.origin.y],
            logs: paths.iter().map(|p| p.display().to_string()).collect(),
        },
    )?;
    println!("consistency {:.4} over {} runs", s.consistency, s.runs);
    Ok(Outcome::Ok)
}

fn cmd_serve_check(host: &str, port: u16, timeout: f64) -> Result<Outcome> {
    if !(timeout > 0.0 && timeout.is_finite()) {
        bail!("timeout must be positive");
    }
    match serve_check(host, port, Duration::from_secs_f64(timeout)) {
        Ok(out) => {
            println!("ok {}", serde_json::to_string(&out)?);
            Ok(Outcome::Ok)
        }
        Err(e) => {
            println!("rejected ({}): {e}", e.cause());
            Ok(Outcome::Failed)
        }
    }
}
