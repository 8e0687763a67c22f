//! `byztwin`: validate, run, replay and explore cyber-range scenarios.
//!
//! Exit codes: 0 success, 1 invalid input, 2 violation detected (or a
//! replay that does not reproduce its recorded report).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use byztwin_cli::api;
use byztwin_cli::rundir;
use byztwin_cli::runs::RunManager;
use byztwin_core::sim::dur;
use byztwin_core::store::{export_siem, AuditEvent, Body};
use byztwin_core::twin::SweepParam;
use byztwin_core::{
    build_report, FaultSpec, Scenario, SimTime, SweepAxis, Topic, Twin, World, WorldOptions,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "byztwin", version, about = "Deterministic BFT cyber range")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Apply deferred advisories without waiting for a human.
    #[arg(long, global = true)]
    auto_confirm: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a scenario file.
    Validate { scenario: PathBuf },
    /// Run a scenario to completion and record it.
    Run { scenario: PathBuf },
    /// Branch a vulnerability sweep from a point of a scenario run.
    Sweep {
        scenario: PathBuf,
        /// Branch point.
        #[arg(long)]
        at: String,
        /// Simulated time each cell runs past the branch point.
        #[arg(long)]
        horizon: String,
        /// `param=v1,v2,..`; params: timeout, leader_delay, watchdog_window,
        /// ot_base_delay, consensus_base_delay.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        /// JSON array of fault specs (windows relative to the branch point).
        #[arg(long)]
        faults: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Re-execute a recorded run from its external log and compare reports.
    Replay { run: PathBuf },
    /// Rebuild the report of a recorded run from its store.
    Report {
        run: PathBuf,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Write `siem.events` of a recorded run as newline-delimited JSON.
    ExportSiem {
        run: PathBuf,
        /// First offset.
        #[arg(long, default_value_t = 0)]
        from: u64,
        /// End offset, exclusive.
        #[arg(long)]
        to: Option<u64>,
    },
}

/// Error paired with its exit code.
struct Exit(u8, anyhow::Error);

fn invalid(e: anyhow::Error) -> Exit {
    Exit(1, e)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, Exit> {
    let g = cli.global;
    match cli.cmd {
        Cmd::Validate { scenario } => validate(&scenario),
        Cmd::Run { scenario } => run(&g, &scenario),
        Cmd::Sweep {
            scenario,
            at,
            horizon,
            axes,
            faults,
            budget,
        } => sweep(&g, &scenario, &at, &horizon, &axes, faults.as_deref(), budget),
        Cmd::Replay { run } => replay(&run),
        Cmd::Report { run, from, to } => report(&g, &run, from.as_deref(), to.as_deref()),
        Cmd::Serve { addr } => serve(&g, &addr).map_err(invalid),
        Cmd::ExportSiem { run, from, to } => export(&g, &run, from, to).map_err(invalid),
    }
}

fn load(path: &Path) -> Result<Scenario, Exit> {
    let s = Scenario::load(path).map_err(|e| invalid(e.into()))?;
    s.validate().map_err(|e| invalid(e.into()))?;
    Ok(s)
}

fn time(s: &str) -> Result<SimTime, Exit> {
    dur::parse(s).map_err(|e| invalid(anyhow::anyhow!(e)))
}

fn validate(path: &Path) -> Result<u8, Exit> {
    let s = load(path)?;
    println!("{}: ok ({}, seed {}, {})", path.display(), s.name, s.seed, dur::format(s.duration));
    Ok(0)
}

fn options(g: &Global) -> WorldOptions {
    WorldOptions {
        seed: g.seed,
        auto_confirm: g.auto_confirm.then_some(true),
        ..Default::default()
    }
}

fn run(g: &Global, path: &Path) -> Result<u8, Exit> {
    let scenario = load(path)?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let broker = rundir::create_store(&dir).map_err(|e| invalid(e.into()))?;
    let mut opts = options(g);
    opts.broker = Some(Arc::new(broker));
    let fatal = |e: anyhow::Error| Exit(1, e);
    let mut world = World::new(scenario.clone(), opts).map_err(|e| fatal(e.into()))?;
    let report = world.run().map_err(|e| fatal(e.into()))?;
    rundir::write(&dir, &scenario, world.broker(), &report).map_err(|e| fatal(e.into()))?;
    let m = &report.metrics;
    println!(
        "{:?}: {} decisions, {} view changes, {} false suspicions, {} fail-safe",
        report.outcome, m.decisions, m.view_changes, m.false_suspicions, m.fail_safe
    );
    println!("report {} -> {}", report.hash(), dir.display());
    Ok(report.exit_code() as u8)
}

fn replay(dir: &Path) -> Result<u8, Exit> {
    let l = rundir::load(dir).map_err(|e| invalid(e.into()))?;
    let opts = WorldOptions {
        seed: Some(l.manifest.seed),
        auto_confirm: Some(l.manifest.auto_confirm),
        externals: Some(l.externals),
        ..Default::default()
    };
    let mut world = World::new(l.scenario, opts).map_err(|e| invalid(e.into()))?;
    let report = world.run().map_err(|e| Exit(1, e.into()))?;
    let hash = report.hash();
    if hash != l.manifest.report_hash {
        return Err(Exit(
            2,
            anyhow::anyhow!("replay diverged: recorded {}, replayed {hash}", l.manifest.report_hash),
        ));
    }
    println!("replay matches: {hash} ({:?})", report.outcome);
    Ok(report.exit_code() as u8)
}

fn report(g: &Global, dir: &Path, from: Option<&str>, to: Option<&str>) -> Result<u8, Exit> {
    let broker = rundir::open_store(dir).map_err(|e| invalid(e.into()))?;
    let end = broker
        .records(Topic::OtAudit)
        .iter()
        .rev()
        .find_map(|r| match &r.body {
            Body::Audit(AuditEvent::RunCompleted { at }) => Some(*at),
            _ => None,
        })
        .unwrap_or_else(|| {
            Topic::ALL
                .iter()
                .filter_map(|t| broker.records(*t).last().map(|r| r.stamp.real))
                .max()
                .unwrap_or(SimTime::ZERO)
        });
    let from = from.map(time).transpose()?.unwrap_or(SimTime::ZERO);
    let to = to.map(time).transpose()?.unwrap_or(end);
    let r = build_report(&broker, from, to).map_err(|e| invalid(e.into()))?;
    let json = serde_json::to_string_pretty(&r).map_err(|e| invalid(e.into()))?;
    write_out(g, &json).map_err(invalid)?;
    Ok(r.exit_code() as u8)
}

fn write_out(g: &Global, text: &str) -> Result<()> {
    match &g.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn parse_axis(s: &str) -> Result<SweepAxis> {
    let (name, values) = s.split_once('=').context("axis must be `param=v1,v2,..`")?;
    let param: SweepParam =
        serde_json::from_value(serde_json::Value::String(name.trim().to_string())).with_context(|| format!("unknown axis `{name}`"))?;
    let values: Vec<serde_json::Value> = values
        .split(',')
        .map(|v| serde_json::Value::String(v.trim().to_string()))
        .collect();
    let axis: SweepAxis = serde_json::from_value(serde_json::json!({ "param": param, "values": values }))?;
    axis.numbers().map_err(anyhow::Error::msg)?;
    Ok(axis)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    g: &Global,
    path: &Path,
    at: &str,
    horizon: &str,
    axes: &[String],
    faults: Option<&Path>,
    budget: Option<usize>,
) -> Result<u8, Exit> {
    let scenario = load(path)?;
    let at = time(at)?;
    let horizon = time(horizon)?;
    let axes: Vec<SweepAxis> = axes.iter().map(|a| parse_axis(a)).collect::<Result<_>>().map_err(invalid)?;
    let faults: Vec<FaultSpec> = match faults {
        None => Vec::new(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(invalid)?;
            serde_json::from_str(&text).context("fault specs").map_err(invalid)?
        }
    };
    if at >= scenario.duration {
        return Err(invalid(anyhow::anyhow!("--at must fall inside the run")));
    }
    let budget = budget.unwrap_or(scenario.twin.max_cells);
    let fatal = |e: anyhow::Error| Exit(1, e);
    let mut world = World::new(scenario.clone(), options(g)).map_err(|e| fatal(e.into()))?;
    world.run_until(at).map_err(|e| fatal(e.into()))?;
    let auto = byztwin_core::harness::run_params(world.broker()).map_err(|e| fatal(e.into()))?.auto_confirm;
    let mut twin = Twin::new(Arc::new(scenario), world.seed(), auto);
    twin.catch_up(world.broker()).map_err(|e| fatal(e.into()))?;
    let snap = twin.snapshot(world.now());
    let map = twin
        .sweep(&snap.id, &axes, &faults, horizon, budget)
        .map_err(|e| invalid(e.into()))?;
    for c in &map.cells {
        let vals: Vec<String> = c
            .values
            .iter()
            .zip(&map.axes)
            .map(|(v, a)| match a.param {
                SweepParam::WatchdogWindow => v.to_string(),
                _ => dur::format(SimTime(*v)),
            })
            .collect();
        println!("{:<24} {:?}", vals.join(" "), c.outcome);
    }
    println!("{} cells, {} frontier pairs", map.cells.len(), map.frontier.len());
    if let Some(p) = &g.out {
        let json = serde_json::to_string_pretty(&map).map_err(|e| fatal(e.into()))?;
        fs::write(p, json).with_context(|| format!("writing {}", p.display())).map_err(fatal)?;
    }
    Ok(0)
}

fn serve(g: &Global, addr: &str) -> Result<u8> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let runs = Arc::new(RunManager::new(g.out.clone()));
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, api::router(runs))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(0)
}

fn export(g: &Global, dir: &Path, from: u64, to: Option<u64>) -> Result<u8> {
    let broker = rundir::open_store(dir)?;
    let to = to.unwrap_or_else(|| broker.head(Topic::SiemEvents));
    if from > to {
        bail!("--from {from} is past --to {to}");
    }
    let n = match &g.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            export_siem(&broker, from..to, std::io::BufWriter::new(f))?
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let n = export_siem(&broker, from..to, &mut lock)?;
            lock.flush()?;
            n
        }
    };
    eprintln!("{n} events");
    Ok(0)
}
