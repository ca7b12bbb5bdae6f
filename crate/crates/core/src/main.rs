use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use iosim::config::{load_config, Config};
use iosim::report::{self, emit_reports};
use iosim::sim::{simulate, ReplayMode};
use iosim::trace::{looks_canonical, normalize, parse_trace, CanonicalRequest, CanonicalTrace, NormalizeOptions};
use iosim::workload::{generate, merge_streams};

#[derive(Parser)]
#[command(name = "iosim", version, about = "Trace-driven simulator of a PC storage stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Replay {
    Closed,
    Open,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace or generated workload and write reports.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Raw Filemon capture or canonical trace.
        #[arg(long, conflicts_with = "generate")]
        trace: Option<PathBuf>,
        /// Use the config's [workload] sections instead of a trace.
        #[arg(long)]
        generate: bool,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        replay: Option<Replay>,
        /// Measured per-request latencies (`# iosim-baseline v1`).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        tolerance_us: Option<u64>,
        #[arg(long)]
        dump_events: bool,
    },
    /// Normalise a raw Filemon capture into a canonical trace.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4096)]
        cluster_size: u64,
    },
}

fn read_trace(path: &Path, opts: &NormalizeOptions) -> Result<Vec<CanonicalRequest>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if looks_canonical(&text) {
        return Ok(CanonicalTrace::read_from(text.as_bytes())?.requests);
    }
    let (reqs, defects) = normalize(&parse_trace(&text)?, opts)?;
    if !defects.dropped_lines.is_empty() {
        eprintln!("trace: dropped {} defective line(s)", defects.dropped_lines.len());
    }
    Ok(reqs)
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    config: &Path,
    trace: Option<PathBuf>,
    generate_flag: bool,
    output: &Path,
    seed: Option<u64>,
    replay: Option<Replay>,
    baseline: Option<PathBuf>,
    tolerance_us: Option<u64>,
    dump_events: bool,
) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg: Config = load_config(&text)?;
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    if let Some(r) = replay {
        cfg.replay.mode = match r {
            Replay::Closed => ReplayMode::Closed,
            Replay::Open => ReplayMode::Open,
        };
    }
    if let Some(t) = tolerance_us {
        cfg.replay.tolerance_us = t;
    }
    let set = |echo: &mut Vec<(String, String)>, k: &str, v: String| {
        if let Some(e) = echo.iter_mut().find(|(key, _)| key == k) {
            e.1 = v;
        }
    };
    set(&mut cfg.echo, "replay.mode", cfg.replay.mode.as_str().to_string());
    set(&mut cfg.echo, "replay.tolerance_us", cfg.replay.tolerance_us.to_string());

    let requests = if generate_flag {
        if cfg.workloads.is_empty() {
            bail!("--generate needs at least one [workload] section");
        }
        let streams = cfg.workloads.iter().map(|(_, w)| generate(w)).collect::<Result<Vec<_>, _>>()?;
        merge_streams(streams)
    } else {
        let path = trace.or_else(|| cfg.trace.path.clone()).context("no trace given (--trace or [trace] path)")?;
        read_trace(&path, &cfg.trace.normalize)?
    };
    let measured = match &baseline {
        Some(p) => Some(report::parse_baseline(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };

    let out = simulate(&cfg.stack, &requests, &cfg.replay, measured.as_ref())?;
    let files = emit_reports(output, &out.records, &out.summary, &cfg.echo, dump_events.then_some(&out.log))?;
    if let Some(m) = &measured {
        let total: u64 = out.records.iter().filter_map(|r| m.get(&r.id)).sum();
        let err = report::error_percent(total as f64, out.summary.total_response_us as f64)?;
        let summary = output.join("summary.txt");
        let mut body = fs::read_to_string(&summary)?;
        body.push_str(&format!("baseline.total_response_us={total}\nerror_percent={err:.3}\n"));
        fs::write(&summary, body)?;
        println!("error_percent={err:.3}");
    }
    println!("requests={} total_response_us={}", out.summary.requests, out.summary.total_response_us);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, trace, generate, output, seed, replay, baseline, tolerance_us, dump_events } => {
            run_simulate(&config, trace, generate, &output, seed, replay, baseline, tolerance_us, dump_events)
        }
        Command::Convert { input, output, cluster_size } => {
            let opts = NormalizeOptions { cluster_size_bytes: cluster_size, ..Default::default() };
            let reqs = read_trace(&input, &opts)?;
            let trace = CanonicalTrace { cluster_size_bytes: cluster_size, requests: reqs };
            fs::write(&output, trace.to_text()).with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {} request(s) to {}", trace.requests.len(), output.display());
            Ok(())
        }
    }
}
