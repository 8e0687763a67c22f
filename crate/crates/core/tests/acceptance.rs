//! Acceptance suite. Runs every primary criterion, prints one line per
//! criterion and exits non-zero if any fails.
//!
//! `cargo test -p byztwin-core --test acceptance -- 3 7` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use byztwin_core::advisory::{apply_decision, ManagerDecision, Recommendation, Verdict};
use byztwin_core::consensus::{Command, ConfigDelta, Digest, MessageKind, ReplicaEvent, Seq};
use byztwin_core::fault::{FaultAction, FaultSpec, MessageMatch, StateMutation, TraceAction, Window};
use byztwin_core::harness::{JobKind, Outcome, Scenario, ScriptedExternal, TwinJob, World, WorldOptions};
use byztwin_core::net::{DelayDistribution, Lane};
use byztwin_core::plant::{PlcEvent, PlcMode, SupervisoryCommand};
use byztwin_core::sim::{ComponentId, ReplicaId, SimTime};
use byztwin_core::store::{AuditEvent, Body, Broker, ExternalAction, Record, StoreError, Topic};
use byztwin_core::twin::{divergence, AnomalyMetric, SweepAxis, SweepParam, Twin, TwinResult, WhatIfDelta};

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn r(i: u32) -> ReplicaId {
    ReplicaId(i)
}

fn base(name: &str, seed: u64, duration: SimTime) -> Scenario {
    let mut s = Scenario::from_toml(&format!(
        r#"
schema_version = 1
name = "{name}"
seed = 0
duration = "1s"

[topology]
f = 1
spares = 1

[topology.lanes.consensus]
kind = "partial_sync"
base_delay = "1ms"
gst = "0"
post_gst_bound = "5ms"
pre_gst_cap = "20ms"
distribution = {{ type = "uniform", max = "2ms" }}

[topology.lanes.ot]
kind = "deterministic"
base_delay = "1ms"
jitter_bound = "200us"

[consensus]
timeout = "20ms"
"#
    ))
    .expect("base scenario parses");
    s.duration = duration;
    s.seed = seed >> 1;
    s
}

fn spec(id: u32, action: FaultAction, bound: &[u32], kinds: &[MessageKind], window: Window) -> FaultSpec {
    FaultSpec {
        id,
        action,
        bound_replicas: bound.iter().map(|i| r(*i)).collect(),
        matcher: MessageMatch::kinds(kinds),
        window,
    }
}

fn audits(b: &Broker) -> Vec<(Arc<Record>, AuditEvent)> {
    b.records(Topic::OtAudit)
        .into_iter()
        .filter_map(|rec| match &rec.body {
            Body::Audit(ev) => Some((rec.clone(), ev.clone())),
            _ => None,
        })
        .collect()
}

/// Replicas bound to a fault that makes them faulty: anything but network
/// perturbation of their traffic.
fn faulty_set(specs: &[FaultSpec]) -> BTreeSet<ReplicaId> {
    specs
        .iter()
        .filter(|s| {
            matches!(
                s.action,
                FaultAction::Equivocate | FaultAction::StateLie { .. } | FaultAction::SelectiveDrop { .. } | FaultAction::Crash
            )
        })
        .flat_map(|s| s.bound_replicas.iter().copied())
        .collect()
}

/// Sequence numbers at which two correct replicas decided different
/// digests, from every decision and state transfer recorded, plus the
/// replicas' final logs.
fn conflicts(w: &World, faulty: &BTreeSet<ReplicaId>) -> usize {
    let mut by_seq: BTreeMap<Seq, BTreeSet<Digest>> = BTreeMap::new();
    for (_, ev) in audits(w.broker()) {
        match ev {
            AuditEvent::Decision { replica, seq, digest, .. } if !faulty.contains(&replica) => {
                by_seq.entry(seq).or_default().insert(digest);
            }
            AuditEvent::Replica {
                replica,
                detail: ReplicaEvent::StateTransferred { entries },
            } if !faulty.contains(&replica) => {
                for (s, d) in entries {
                    by_seq.entry(s).or_default().insert(d);
                }
            }
            _ => {}
        }
    }
    for (id, rep) in w.replicas() {
        if !faulty.contains(id) {
            for (s, e) in rep.decided_log() {
                by_seq.entry(*s).or_default().insert(e.digest);
            }
        }
    }
    by_seq.values().filter(|d| d.len() > 1).count()
}

/// First installation time of each view.
fn view_installs(b: &Broker) -> BTreeMap<u64, SimTime> {
    let mut out = BTreeMap::new();
    for (rec, ev) in audits(b) {
        if let AuditEvent::Replica {
            detail: ReplicaEvent::NewViewInstalled { view, .. },
            ..
        } = ev
        {
            out.entry(view).or_insert(rec.stamp.real);
        }
    }
    out
}

/// A random within-model scenario: one replica bound to a mix of
/// Byzantine kinds, plus network delay specs on arbitrary replicas.
fn random_safety(i: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut s = base(&format!("safety-{i}"), rng.random(), ms(3000));
    s.topology.lanes.consensus = Lane::partial_sync(
        ms(1),
        DelayDistribution::LogNormal {
            median: SimTime::from_micros(rng.random_range(300..3000)),
            sigma: 1.0,
        },
        ms(rng.random_range(0..1500)),
        ms(rng.random_range(4..8)),
        ms(rng.random_range(20..60)),
    );
    s.consensus.timeout = ms(rng.random_range(10..40));
    let b = rng.random_range(0..4u32);
    let mut id = 0;
    let window = |rng: &mut ChaCha8Rng| {
        let start = ms(rng.random_range(0..2000));
        if rng.random_bool(0.3) {
            Window { start, end: None }
        } else {
            Window::between(start, start + ms(rng.random_range(100..1500)))
        }
    };
    let all_kinds = [MessageKind::PrePrepare, MessageKind::Prepare, MessageKind::Commit, MessageKind::ViewChange, MessageKind::NewView];
    let kinds = |rng: &mut ChaCha8Rng| -> Vec<MessageKind> {
        all_kinds.iter().copied().filter(|_| rng.random_bool(0.4)).collect()
    };
    let mut chosen: Vec<u8> = (0..4).filter(|_| rng.random_bool(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(0..4));
    }
    for c in chosen {
        id += 1;
        let action = match c {
            0 => FaultAction::Equivocate,
            1 => FaultAction::StateLie {
                mutation: if rng.random_bool(0.5) {
                    StateMutation::DigestSubstitution
                } else {
                    StateMutation::RollbackClaim { by: rng.random_range(1..20) }
                },
            },
            2 => FaultAction::SelectiveDrop {
                probability: rng.random_range(0.3..1.0),
            },
            _ => FaultAction::Crash,
        };
        let w = if c == 3 {
            let start = ms(rng.random_range(0..2000));
            Window::between(start, start + ms(rng.random_range(50..800)))
        } else {
            window(&mut rng)
        };
        let k = if c == 0 { vec![] } else { kinds(&mut rng) };
        s.faults.push(spec(id, action, &[b], &k, w));
    }
    for _ in 0..rng.random_range(0..3) {
        id += 1;
        let target = rng.random_range(0..4u32);
        let k = kinds(&mut rng);
        let w = window(&mut rng);
        s.faults.push(spec(id, FaultAction::Delay { delay: ms(rng.random_range(1..50)) }, &[target], &k, w));
    }
    s
}

struct Crit {
    pass: bool,
    detail: String,
}

fn crit(pass: bool, detail: impl Into<String>) -> Crit {
    Crit {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------

fn c1_safety() -> Crit {
    let results: Vec<(usize, usize, bool)> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let s = random_safety(i);
            let faulty = faulty_set(&s.faults);
            let mut w = World::new(s, WorldOptions { disable_twin: true, ..Default::default() }).expect("valid scenario");
            let report = w.run().expect("run completes");
            let fired = report.injection_trace.iter().any(|t| !matches!(t.action, TraceAction::Delayed { .. }));
            (conflicts(&w, &faulty), report.metrics.decisions as usize, fired)
        })
        .collect();
    let bad = results.iter().filter(|r| r.0 > 0).count();
    let total: usize = results.iter().map(|r| r.0).sum();
    let decisions: usize = results.iter().map(|r| r.1).sum();
    let fired = results.iter().filter(|r| r.2).count();
    crit(
        total == 0,
        format!("200 scenarios, {total} conflicting sequence numbers in {bad} runs; {decisions} decisions, byzantine injections fired in {fired} runs"),
    )
}

fn c2_liveness() -> Crit {
    let runs: Vec<(u64, usize, usize, usize)> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x11FE ^ i);
            let mut s = base(&format!("liveness-{i}"), rng.random(), ms(4000));
            let gst = ms(rng.random_range(200..2000));
            let bound = ms(rng.random_range(3..8));
            let cap = ms(rng.random_range(20..60));
            s.topology.lanes.consensus = Lane::partial_sync(
                ms(1),
                DelayDistribution::LogNormal {
                    median: SimTime::from_micros(rng.random_range(500..4000)),
                    sigma: 1.0,
                },
                gst,
                bound,
                cap,
            );
            s.consensus.timeout = bound.mul(rng.random_range(2..5));
            let timeout = s.consensus.timeout;
            let end = s.duration;
            let mut w = World::new(s, WorldOptions { disable_twin: true, ..Default::default() }).expect("valid");
            w.run().expect("run completes");
            // Traffic sent before GST may still be in flight until GST + cap.
            let stable = gst + cap;
            let vcs = view_installs(w.broker()).values().filter(|t| **t >= stable).count();
            let mut issued = BTreeMap::new();
            let mut confirmed = BTreeSet::new();
            for (rec, ev) in audits(w.broker()) {
                match ev {
                    AuditEvent::ManagerRequest { req_id, retransmit: false, .. } => {
                        issued.insert(req_id, rec.stamp.real);
                    }
                    AuditEvent::ManagerConfirmed { req_id, .. } => {
                        confirmed.insert(req_id);
                    }
                    _ => {}
                }
            }
            // Requests issued after stabilization with time left to finish.
            let due: Vec<u64> = issued
                .iter()
                .filter(|(_, t)| **t >= stable && **t + timeout.mul(4) < end)
                .map(|(id, _)| *id)
                .collect();
            let undecided = due.iter().filter(|id| !confirmed.contains(id)).count();
            (i, vcs, due.len(), undecided)
        })
        .collect();
    let vcs: usize = runs.iter().map(|r| r.1).sum();
    let undecided: usize = runs.iter().map(|r| r.3).sum();
    let requests: usize = runs.iter().map(|r| r.2).sum();
    crit(
        vcs == 0 && undecided == 0,
        format!("50 runs, {requests} post-GST requests, {undecided} undecided, {vcs} post-GST view changes"),
    )
}

fn c3_false_suspicion() -> Crit {
    let mut s = base("false-suspicion-grid", 7, ms(1300));
    s.topology.lanes.consensus = Lane::deterministic(SimTime::ZERO, SimTime::ZERO);
    let grid: Vec<SimTime> = (1..=10).map(ms).collect();
    let template = vec![spec(
        1,
        FaultAction::Delay { delay: ms(1) },
        &[0],
        &[MessageKind::PrePrepare],
        Window::always(),
    )];
    s.twin.jobs.push(TwinJob {
        at: ms(1050),
        kind: JobKind::Sweep {
            axes: vec![
                SweepAxis::times(SweepParam::Timeout, &grid),
                SweepAxis::times(SweepParam::LeaderDelay, &grid),
            ],
            faults: template,
            horizon: ms(250),
            budget: None,
        },
    });
    let mut w = World::new(s, WorldOptions::default()).expect("valid");
    w.run().expect("run completes");
    let map = w
        .broker()
        .records(Topic::TwinResults)
        .iter()
        .find_map(|rec| match &rec.body {
            Body::TwinResult(TwinResult::Sweep(m)) => Some(m.clone()),
            _ => None,
        });
    let Some(map) = map else {
        return crit(false, "sweep produced no vulnerability map");
    };
    // Oracle: a view change happens iff the leader's delay reaches the timeout.
    let oracle = |t: u64, d: u64| d >= t;
    let mut mismatches = Vec::new();
    let mut oracle_frontier = BTreeSet::new();
    for c in &map.cells {
        let (t, d) = (c.values[0], c.values[1]);
        let vc = c.metrics.view_changes > 0;
        if vc != oracle(t, d) {
            mismatches.push(format!("T={}ms d={}ms vc={}", t / 1000, d / 1000, c.metrics.view_changes));
        }
        for (dt, dd) in [(1usize, 0usize), (0, 1)] {
            let (i, j) = (c.coords[0] + dt, c.coords[1] + dd);
            if i < 10 && j < 10 && oracle(grid[i].0, grid[j].0) != oracle(t, d) {
                oracle_frontier.insert((c.coords.clone(), vec![i, j]));
            }
        }
    }
    let sweep_frontier: BTreeSet<(Vec<usize>, Vec<usize>)> = map
        .frontier
        .iter()
        .map(|(a, b)| (map.cells[*a].coords.clone(), map.cells[*b].coords.clone()))
        .collect();
    let near = |a: &(Vec<usize>, Vec<usize>), set: &BTreeSet<(Vec<usize>, Vec<usize>)>| {
        set.iter().any(|b| {
            a.0.iter().zip(&b.0).all(|(x, y)| x.abs_diff(*y) <= 1) && a.1.iter().zip(&b.1).all(|(x, y)| x.abs_diff(*y) <= 1)
        })
    };
    let frontier_ok = !sweep_frontier.is_empty()
        && sweep_frontier.iter().all(|p| near(p, &oracle_frontier))
        && oracle_frontier.iter().all(|p| near(p, &sweep_frontier));
    let storms = map.cells.iter().filter(|c| c.outcome == Outcome::FalseSuspicionStorm).count();
    crit(
        mismatches.is_empty() && frontier_ok,
        format!(
            "{} cells, {} mismatches with d >= T {:?}; frontier {} pairs vs oracle {} ({}); {storms} storm cells",
            map.cells.len(),
            mismatches.len(),
            mismatches.iter().take(5).collect::<Vec<_>>(),
            sweep_frontier.len(),
            oracle_frontier.len(),
            if frontier_ok { "within one cell" } else { "DIFFERS" }
        ),
    )
}

fn c4_watchdog() -> Crit {
    let runs: Vec<Result<(SimTime, SimTime), String>> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xD06 ^ i);
            let cut = ms(rng.random_range(1000..2000));
            let mut s = base(&format!("watchdog-{i}"), rng.random(), cut + ms(1500));
            s.plc.watchdog_window = 5;
            s.plc.cycle_period = ms(100);
            s.plc.sensor_noise = Some(rng.random_range(0.0..0.02));
            let ot_bound = s.topology.lanes.ot.stable_bound();
            let capacity = s.plant.capacity;
            // Supervisory silence: the manager can no longer reach the PLC.
            s.faults.push(FaultSpec {
                id: 1,
                action: FaultAction::Partition {
                    groups: vec![[ComponentId::Manager].into(), [ComponentId::Plc].into()],
                },
                bound_replicas: BTreeSet::new(),
                matcher: MessageMatch::default(),
                window: Window { start: cut, end: None },
            });
            let mut w = World::new(s, WorldOptions { disable_twin: true, ..Default::default() }).expect("valid");
            w.run().map_err(|e| e.to_string())?;
            let b = w.broker();
            let last_cmd = b
                .records(Topic::OtActuation)
                .iter()
                .filter(|r| r.stamp.real < cut)
                .map(|r| r.stamp.real)
                .max()
                .ok_or("no supervisory command before the cut")?;
            // Silence starts once the last command has certainly arrived.
            let t0 = last_cmd + ot_bound;
            let fail_safe = audits(b)
                .into_iter()
                .find_map(|(rec, ev)| match ev {
                    AuditEvent::Plc { detail: PlcEvent::FailSafeEngaged { .. } } => Some(rec.stamp.real),
                    _ => None,
                })
                .ok_or("no fail-safe")?;
            let deadline = t0 + ms(100).mul(6);
            let over = b.records(Topic::OtTelemetry).iter().any(|r| match &r.body {
                Body::Telemetry(t) => t.level > capacity,
                _ => false,
            }) || w.plant().level > capacity;
            if fail_safe > deadline {
                return Err(format!("seed {i}: fail-safe at {fail_safe}, deadline {deadline}"));
            }
            if over {
                return Err(format!("seed {i}: level above capacity"));
            }
            if w.plc().mode != PlcMode::FailSafe {
                return Err(format!("seed {i}: PLC left fail-safe"));
            }
            Ok((fail_safe.saturating_sub(t0), deadline.saturating_sub(t0)))
        })
        .collect();
    let errs: Vec<&String> = runs.iter().filter_map(|r| r.as_ref().err()).collect();
    let worst = runs.iter().filter_map(|r| r.as_ref().ok()).map(|(l, _)| *l).max().unwrap_or(SimTime::ZERO);
    crit(
        errs.is_empty(),
        format!("20 seeds, worst silence-to-fail-safe {worst} (limit 600ms); {errs:?}"),
    )
}

/// Scenarios for the determinism and fidelity criteria: random faults plus
/// a live injection and twin jobs.
fn rich(i: u64) -> Scenario {
    let mut s = random_safety(1000 + i);
    s.name = format!("replay-{i}");
    let mut rng = ChaCha8Rng::seed_from_u64(0xEE ^ i);
    s.external.push(ScriptedExternal {
        at: ms(rng.random_range(200..1500)),
        principal: "console".into(),
        action: ExternalAction::InjectFault {
            spec: spec(
                90,
                FaultAction::Delay { delay: ms(rng.random_range(5..40)) },
                &[rng.random_range(0..4)],
                &[MessageKind::PrePrepare],
                Window::between(SimTime::ZERO, ms(300)),
            ),
        },
    });
    s.twin.jobs.push(TwinJob {
        at: ms(2200),
        kind: JobKind::WhatIf {
            delta: WhatIfDelta {
                timeout: Some(ms(rng.random_range(5..60))),
                ..Default::default()
            },
            faults: vec![],
            horizon: ms(300),
        },
    });
    s.twin.jobs.push(TwinJob { at: ms(2600), kind: JobKind::Detect });
    s.twin.jobs.push(TwinJob { at: ms(2700), kind: JobKind::CheckState });
    s
}

fn external_log(b: &Broker) -> Vec<byztwin_core::store::ExternalEvent> {
    b.records(Topic::RangeExternal)
        .iter()
        .filter_map(|r| match &r.body {
            Body::External(e) => Some(e.clone()),
            _ => None,
        })
        .collect()
}

fn c5_replay() -> Crit {
    let runs: Vec<(String, String, usize)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let s = rich(i);
            let mut a = World::new(s.clone(), WorldOptions::default()).expect("valid");
            let ra = a.run().expect("run");
            let log = external_log(a.broker());
            let mut b = World::new(
                s,
                WorldOptions {
                    externals: Some(log),
                    ..Default::default()
                },
            )
            .expect("valid");
            let rb = b.run().expect("run");
            (ra.hash(), rb.hash(), ra.twin_outputs.len())
        })
        .collect();
    let same = runs.iter().filter(|r| r.0 == r.1).count();
    let outputs: usize = runs.iter().map(|r| r.2).sum();
    crit(
        same == 20,
        format!("{same}/20 report hashes identical across executions ({outputs} twin outputs included)"),
    )
}

fn fidelity(w: &World) -> u64 {
    let mut twin = Twin::new(Arc::new(w.scenario().clone()), w.seed(), false);
    twin.catch_up(w.broker()).expect("twin ingests");
    divergence(twin.state(), &w.live_digest()).expect("comparable").score
}

fn c6_fidelity() -> Crit {
    let scores: Vec<(u64, u64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let s = if i % 2 == 0 { rich(i) } else { random_safety(i) };
            let mut w = World::new(s, WorldOptions::default()).expect("valid");
            let mut worst = 0;
            // Prefixes mid-run as well as the full run.
            for t in [ms(700), ms(1900), ms(3000)] {
                w.run_until(t).expect("run");
                worst = worst.max(fidelity(&w));
            }
            w.finish().expect("finish");
            let entries: u64 = w.replicas().values().map(|r| r.decided_log().len() as u64).sum();
            (worst.max(fidelity(&w)), entries)
        })
        .collect();
    let total: u64 = scores.iter().map(|s| s.0).sum();
    let entries: u64 = scores.iter().map(|s| s.1).sum();
    crit(total == 0, format!("20 runs x 4 prefixes, total divergence {total} over {entries} decided entries"))
}

fn c7_asymmetry() -> Crit {
    let broker = Broker::in_memory();
    let principals = ["twin", "twin-0", "twin-1", "twin-sweep", "twin-whatif", "twin-detector", "twin-*", "twin-twin"];
    let bodies = [
        Body::Actuation(SupervisoryCommand {
            seq: 1,
            setpoint: 5.0,
            watchdog_window: None,
        }),
        Body::Actuation(SupervisoryCommand {
            seq: u64::MAX,
            setpoint: 0.0,
            watchdog_window: Some(1),
        }),
        Body::Audit(AuditEvent::RunCompleted { at: SimTime::ZERO }),
    ];
    let mut attempts = 0;
    let mut unauthorized = 0;
    let mut other = Vec::new();
    for p in principals {
        for topic in [Topic::OtActuation, Topic::OtTelemetry, Topic::OtAudit] {
            for body in &bodies {
                attempts += 1;
                match broker.publish(p, topic, body.clone(), SimTime::ZERO) {
                    Err(StoreError::Unauthorized { .. }) => unauthorized += 1,
                    res => other.push(format!("{p}->{topic}: {res:?}")),
                }
            }
        }
    }
    let written = broker.head(Topic::OtActuation) + broker.head(Topic::OtTelemetry) + broker.head(Topic::OtAudit);
    // Structural: every recommendation the payload space can express turns
    // into configuration or membership commands, never a plant command.
    let recs = [
        Recommendation::Configure {
            delta: ConfigDelta {
                timeout: Some(ms(30)),
                watchdog_window: Some(7),
                ot_base_delay: Some(ms(2)),
            },
        },
        Recommendation::ReplaceReplica { old: r(1) },
        Recommendation::SetMembership {
            members: vec![r(0), r(1), r(2), r(4)],
        },
    ];
    let mut structural = true;
    for rec in recs {
        // Exhaustive: a new variant fails to compile here until classified.
        match &rec {
            Recommendation::Configure { .. } | Recommendation::ReplaceReplica { .. } | Recommendation::SetMembership { .. } => {}
        }
        let d = ManagerDecision {
            advisory: 1,
            verdict: Verdict::Apply,
            rationale: String::new(),
            recommendation: rec,
            operator: "test".into(),
            at: SimTime::ZERO,
            confirmation: None,
        };
        let mut spares = vec![r(4)];
        let cmds = apply_decision(&d, &[r(0), r(1), r(2), r(3)], &mut spares, 1).unwrap_or_default();
        structural &= cmds.iter().all(|c| !matches!(c, Command::Setpoint { .. }));
    }
    let smuggled = serde_json::json!({
        "id": 1, "source": "x", "claim": {"finding": "fail_safe_risk"},
        "recommendation": {"change": "setpoint", "level_milli": 1},
        "evidence": [], "issued_at": 0
    });
    structural &= serde_json::from_value::<byztwin_core::advisory::Advisory>(smuggled).is_err();
    crit(
        unauthorized == attempts && written == 0 && structural && other.is_empty(),
        format!("{unauthorized}/{attempts} twin-plane publishes to ot.* Unauthorized, {written} written; advisory structure has no actuation: {structural}"),
    )
}

fn c8_replacement() -> Crit {
    // Live pipeline: a state-lying replica is found by the twin, replaced
    // after confirmation, with traffic flowing throughout.
    let mut s = base("replacement", 21, ms(5000));
    s.auto_confirm = true;
    s.faults.push(spec(
        1,
        FaultAction::StateLie {
            mutation: StateMutation::DigestSubstitution,
        },
        &[2],
        &[],
        Window::always(),
    ));
    s.twin.jobs.push(TwinJob { at: ms(1500), kind: JobKind::CheckState });
    let mut w = World::new(s, WorldOptions::default()).expect("valid");
    w.run().expect("run");
    let members: BTreeSet<ReplicaId> = w.members().iter().copied().collect();
    let swapped = members == [r(0), r(1), r(3), r(4)].into();
    let mut gaps = Vec::new();
    for id in &members {
        let log = w.replicas()[id].decided_log();
        let keys: Vec<Seq> = log.keys().copied().collect();
        if keys.is_empty() || keys.windows(2).any(|p| p[1] != p[0] + 1) {
            gaps.push(format!("{id}: {} entries", keys.len()));
        }
    }
    let last: BTreeSet<Seq> = members.iter().map(|id| w.replicas()[id].last_executed()).collect();
    let swap_at = audits(w.broker()).into_iter().find_map(|(rec, ev)| match ev {
        AuditEvent::ManagerConfirmed {
            command: Command::Join { .. },
            issued_at,
            ..
        } => Some(issued_at.min(rec.stamp.real)),
        _ => None,
    });
    let vcs_after = swap_at.map_or(usize::MAX, |t| view_installs(w.broker()).values().filter(|v| **v >= t).count());
    let live_conflicts = conflicts(&w, &[r(2)].into());
    let confirmed_after = swap_at.map_or(0, |t| {
        audits(w.broker())
            .iter()
            .filter(|(rec, ev)| rec.stamp.real > t && matches!(ev, AuditEvent::ManagerConfirmed { .. }))
            .count()
    });

    // Safety suite across replacement schedules.
    let sched: Vec<(usize, bool)> = (0..60u64)
        .into_par_iter()
        .map(|i| {
            let mut s = random_safety(5000 + i);
            let mut rng = ChaCha8Rng::seed_from_u64(0x5A ^ i);
            s.external.push(ScriptedExternal {
                at: ms(rng.random_range(300..2000)),
                principal: "console".into(),
                action: ExternalAction::Branch {
                    delta: WhatIfDelta {
                        replace: Some(r(rng.random_range(0..4))),
                        ..Default::default()
                    },
                    faults: vec![],
                    seed: None,
                },
            });
            let faulty = faulty_set(&s.faults);
            let mut w = World::new(s, WorldOptions { disable_twin: true, ..Default::default() }).expect("valid");
            w.run().expect("run");
            (conflicts(&w, &faulty), w.members().contains(&r(4)))
        })
        .collect();
    let suite_conflicts: usize = sched.iter().map(|s| s.0).sum();
    let swaps = sched.iter().filter(|s| s.1).count();
    crit(
        swapped && gaps.is_empty() && vcs_after <= 1 && live_conflicts == 0 && suite_conflicts == 0 && confirmed_after > 0,
        format!(
            "members {members:?}, log gaps {gaps:?}, last executed {last:?}, {vcs_after} view changes after the join, \
             {confirmed_after} requests confirmed after it; safety across 60 replacement schedules ({swaps} swaps completed): {suite_conflicts} conflicts"
        ),
    )
}

fn storm_scenario(storm: bool) -> Scenario {
    let mut s = base(if storm { "storm" } else { "control" }, 31, ms(6000));
    s.topology.lanes.consensus = Lane::deterministic(ms(1), SimTime::from_micros(200));
    s.twin.calibration = ms(4000);
    s.twin.bucket = ms(500);
    s.twin.k = 3.0;
    if storm {
        let mut id = 0;
        let mut delay_at = |t: SimTime, faults: &mut Vec<FaultSpec>| {
            id += 1;
            faults.push(spec(id, FaultAction::Delay { delay: ms(50) }, &[], &[MessageKind::PrePrepare], Window::between(t, t + ms(3))));
        };
        // Baseline: one leader delay per bucket. Storm: three per bucket.
        for b in 0..8 {
            delay_at(ms(500 * b + 100), &mut s.faults);
        }
        for b in 8..11 {
            for off in [0, 200, 400] {
                delay_at(ms(500 * b + off), &mut s.faults);
            }
        }
    }
    s.twin.jobs.push(TwinJob { at: ms(5900), kind: JobKind::Detect });
    s
}

fn detect(storm: bool) -> (Vec<(SimTime, SimTime, AnomalyMetric)>, BTreeMap<u64, usize>) {
    let mut w = World::new(storm_scenario(storm), WorldOptions::default()).expect("valid");
    w.run().expect("run");
    let mut per_bucket = BTreeMap::new();
    for t in view_installs(w.broker()).values() {
        *per_bucket.entry(t.0 / 500_000).or_default() += 1;
    }
    let flagged = w
        .broker()
        .records(Topic::TwinResults)
        .iter()
        .find_map(|rec| match &rec.body {
            Body::TwinResult(TwinResult::Anomalies { anomalies, .. }) => {
                Some(anomalies.iter().map(|a| (a.from, a.to, a.metric)).collect())
            }
            _ => None,
        })
        .unwrap_or_default();
    (flagged, per_bucket)
}

fn c9_anomaly() -> Crit {
    let (storm, per_bucket) = detect(true);
    let (control, _) = detect(false);
    let storm_window = (ms(4000), ms(5500));
    let inside: Vec<(SimTime, SimTime)> = (0..)
        .map(|k| (storm_window.0 + ms(500 * k), storm_window.0 + ms(500 * (k + 1))))
        .take_while(|(_, hi)| *hi <= storm_window.1)
        .collect();
    let missed: Vec<_> = inside
        .iter()
        .filter(|(lo, hi)| {
            !storm
                .iter()
                .any(|(a, b, m)| a == lo && b == hi && *m == AnomalyMetric::ViewChangeRate)
        })
        .collect();
    let base_rate = (0..8).map(|b| per_bucket.get(&b).copied().unwrap_or(0)).sum::<usize>() as f64 / 8.0;
    let storm_rate = (8..11).map(|b| per_bucket.get(&b).copied().unwrap_or(0)).sum::<usize>() as f64 / 3.0;
    crit(
        missed.is_empty() && control.is_empty() && storm_rate >= 3.0 * base_rate && base_rate > 0.0,
        format!(
            "view changes/bucket baseline {base_rate:.2}, storm {storm_rate:.2}; {} storm buckets flagged, missed {missed:?}; control flags {}",
            inside.len() - missed.len(),
            control.len()
        ),
    )
}

fn c10_broker() -> Crit {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("store");
    let s = rich(77);
    let end = s.duration;
    let reference = World::new(s.clone(), WorldOptions::default()).expect("valid").run().expect("run");
    let mut w = World::new(
        s,
        WorldOptions {
            broker: Some(Arc::new(Broker::open_dir(&path).expect("open"))),
            ..Default::default()
        },
    )
    .expect("valid");
    let mut problems = Vec::new();
    let mut restarts = 0;
    for k in 1..=10u64 {
        w.run_until(SimTime(end.0 * k / 11)).expect("run");
        let acked: BTreeMap<Topic, (u64, String)> = Topic::ALL
            .into_iter()
            .map(|t| {
                let h = w.broker().head(t);
                (t, (h, w.broker().range_hash(t, 0..h).expect("hash")))
            })
            .collect();
        // Kill: drop the only handle, then tear the tail of one segment as
        // an interrupted write would.
        let old = w.broker().clone();
        w.set_broker(Arc::new(Broker::in_memory()));
        drop(old);
        let topic = Topic::ALL[(k as usize) % Topic::ALL.len()];
        if let Some(seg) = std::fs::read_dir(path.join(topic.as_str()))
            .ok()
            .and_then(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).max())
        {
            let mut f = std::fs::OpenOptions::new().append(true).open(seg).expect("segment");
            f.write_all(&[0x40, 0, 0, 0, 1, 2, 3, 4, b'{']).expect("tear");
        }
        let reopened = Broker::open_dir(&path).expect("recover");
        for (t, (h, hash)) in &acked {
            let recs = reopened.records(*t);
            if reopened.head(*t) != *h {
                problems.push(format!("restart {k}: {t} head {} != {h}", reopened.head(*t)));
            }
            if recs.iter().enumerate().any(|(i, r)| r.offset != i as u64) {
                problems.push(format!("restart {k}: {t} offsets not contiguous"));
            }
            if reopened.range_hash(*t, 0..*h).ok().as_ref() != Some(hash) {
                problems.push(format!("restart {k}: {t} replay hash changed"));
            }
        }
        w.set_broker(Arc::new(reopened));
        restarts += 1;
    }
    let report = w.run().expect("run");
    let total: u64 = report.heads.values().sum();
    let stable = report.hash() == reference.hash();
    if !stable {
        problems.push("final report differs from the uninterrupted run".into());
    }
    crit(
        problems.is_empty(),
        format!("{restarts} restarts, {total} records, report hash stable vs uninterrupted run: {stable}; {problems:?}"),
    )
}

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let all: [(usize, &str, fn() -> Crit); 10] = [
        (1, "safety under byzantine faults", c1_safety),
        (2, "liveness after GST", c2_liveness),
        (3, "false suspicion iff d >= T", c3_false_suspicion),
        (4, "watchdog fail-safe", c4_watchdog),
        (5, "replay determinism", c5_replay),
        (6, "mirror fidelity", c6_fidelity),
        (7, "advisory asymmetry", c7_asymmetry),
        (8, "replica replacement", c8_replacement),
        (9, "anomaly detection", c9_anomaly),
        (10, "broker crash recovery", c10_broker),
    ];
    let mut failed = 0;
    for (n, name, f) in all {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let c = f();
        if !c.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {:<4} {name}: {} ({:.1}s)",
            if c.pass { "PASS" } else { "FAIL" },
            c.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
