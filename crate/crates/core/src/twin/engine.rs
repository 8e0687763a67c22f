//! The twin engine: mirrors the store, snapshots its state and runs
//! what-if branches by deterministic re-execution.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{
    apply_axis, detect_anomalies, divergence, frontier, ingest, snapshot_id, state_liars, DetectConfig, ExcerptLine,
    Snapshot, SweepAxis, SweepCell, TwinError, TwinResult, TwinState, VulnerabilityMap, WhatIfDelta, WhatIfReport,
};
use crate::fault::FaultSpec;
use crate::harness::{build_report, Scenario, World, WorldOptions};
use crate::sim::{derive_seed, SimTime};
use crate::store::{AuditEvent, Body, Broker, ExternalAction, Record, Topic};

/// Topics the twin mirrors.
pub const TWIN_TOPICS: [Topic; 5] = [
    Topic::OtTelemetry,
    Topic::OtAudit,
    Topic::RangeExternal,
    Topic::TwinResults,
    Topic::TwinAdvisory,
];

const EXCERPT_LINES: usize = 40;

#[derive(Clone, Debug)]
pub struct Twin {
    scenario: Arc<Scenario>,
    seed: u64,
    auto_confirm: bool,
    state: TwinState,
    snapshots: BTreeMap<String, (Snapshot, TwinState)>,
}

impl Twin {
    pub fn new(scenario: Arc<Scenario>, seed: u64, auto_confirm: bool) -> Self {
        Twin {
            scenario,
            seed,
            auto_confirm,
            state: TwinState::default(),
            snapshots: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.values().map(|(s, _)| s)
    }

    /// Ingest every record published since the last call.
    pub fn catch_up(&mut self, broker: &Broker) -> Result<(), TwinError> {
        for topic in TWIN_TOPICS {
            let mut sub = broker
                .subscribe("twin", topic, self.state.cursor(topic))
                .map_err(|e| TwinError::Store(e.to_string()))?;
            for rec in sub.poll(broker) {
                ingest(&mut self.state, &rec)?;
            }
        }
        Ok(())
    }

    /// Freeze the current mirror as of real time `at`.
    pub fn snapshot(&mut self, at: SimTime) -> Snapshot {
        let id = snapshot_id(&self.state);
        let snap = Snapshot {
            id: id.clone(),
            at,
            cursors: self.state.cursors.clone(),
        };
        self.snapshots.insert(id, (snap.clone(), self.state.clone()));
        snap
    }

    /// Roll the mirror back to a snapshot.
    pub fn restore(&mut self, id: &str) -> Result<(), TwinError> {
        let (_, state) = self.snapshots.get(id).ok_or_else(|| TwinError::UnknownSnapshot(id.into()))?;
        self.state = state.clone();
        Ok(())
    }

    fn get(&self, id: &str) -> Result<&(Snapshot, TwinState), TwinError> {
        self.snapshots.get(id).ok_or_else(|| TwinError::UnknownSnapshot(id.into()))
    }

    /// Re-execute the run from genesis up to the snapshot, replaying the
    /// recorded external log and twin outputs, and check it matches the
    /// mirrored state.
    pub fn base_world(&self, id: &str) -> Result<World, TwinError> {
        let (snap, state) = self.get(id)?;
        let opts = WorldOptions {
            seed: Some(self.seed),
            externals: Some(state.externals.clone()),
            outputs: state.outputs.clone(),
            disable_twin: true,
            auto_confirm: Some(self.auto_confirm),
            broker: None,
        };
        let mut w = World::new((*self.scenario).clone(), opts).map_err(|e| TwinError::Sim(e.to_string()))?;
        w.run_until(snap.at).map_err(|e| TwinError::Sim(e.to_string()))?;
        let d = divergence(state, &w.live_digest())?;
        if d.score > 0 {
            return Err(TwinError::ReplayDiverged(d.score));
        }
        Ok(w)
    }

    /// Branch from the snapshot with a configuration delta and extra faults.
    pub fn what_if(
        &self,
        id: &str,
        delta: WhatIfDelta,
        faults: Vec<FaultSpec>,
        horizon: SimTime,
        seed: Option<u64>,
    ) -> Result<WhatIfReport, TwinError> {
        let errs = delta.check(&self.scenario.topology);
        if !errs.is_empty() {
            return Err(TwinError::InvalidDelta(errs.join("; ")));
        }
        let base = self.base_world(id)?;
        self.branch(id, &base, delta, faults, horizon, seed)
    }

    fn branch(
        &self,
        id: &str,
        base: &World,
        delta: WhatIfDelta,
        faults: Vec<FaultSpec>,
        horizon: SimTime,
        seed: Option<u64>,
    ) -> Result<WhatIfReport, TwinError> {
        let at = base.now();
        let mut w = base.fork();
        let base_audit = w.broker().head(Topic::OtAudit);
        w.submit(
            "harness",
            ExternalAction::Branch {
                delta: delta.clone(),
                faults: faults.clone(),
                seed,
            },
        )
        .map_err(|e| TwinError::InvalidFaults(e.to_string()))?;
        w.set_end(at + horizon);
        w.run_until(at + horizon).map_err(|e| TwinError::Sim(e.to_string()))?;
        let report = build_report(w.broker(), at, w.now()).map_err(|e| TwinError::Sim(e.to_string()))?;
        let excerpt = w
            .broker()
            .records(Topic::OtAudit)
            .into_iter()
            .skip(base_audit as usize)
            .filter_map(|r| notable(&r))
            .take(EXCERPT_LINES)
            .collect();
        Ok(WhatIfReport {
            snapshot: id.to_string(),
            at,
            delta,
            faults,
            horizon,
            seed: seed.unwrap_or(self.seed),
            outcome: report.outcome,
            metrics: report.metrics.clone(),
            effective_timeout: w.current_timeout(),
            effective_watchdog_window: w.plc().watchdog_window,
            report_hash: report.hash(),
            excerpt,
        })
    }

    /// Evaluate the cartesian product of the axes, row-major, one branch per
    /// cell with its own seed.
    pub fn sweep(
        &self,
        id: &str,
        axes: &[SweepAxis],
        faults: &[FaultSpec],
        horizon: SimTime,
        budget: usize,
    ) -> Result<VulnerabilityMap, TwinError> {
        let values: Vec<Vec<u64>> = axes
            .iter()
            .map(|a| a.numbers())
            .collect::<Result<_, _>>()
            .map_err(TwinError::InvalidDelta)?;
        let cells_n: usize = values.iter().map(Vec::len).product();
        if cells_n > budget {
            return Err(TwinError::BudgetExceeded { cells: cells_n, budget });
        }
        let mut coords: Vec<Vec<usize>> = vec![Vec::new()];
        for v in &values {
            coords = coords
                .into_iter()
                .flat_map(|c| {
                    (0..v.len()).map(move |i| {
                        let mut c = c.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }
        let base = self.base_world(id)?;
        let cells: Vec<SweepCell> = coords
            .into_par_iter()
            .map(|c| {
                let mut delta = WhatIfDelta::default();
                let mut fs = faults.to_vec();
                let vals: Vec<u64> = c.iter().zip(&values).map(|(i, v)| v[*i]).collect();
                for (axis, v) in axes.iter().zip(&vals) {
                    apply_axis(axis.param, *v, &mut delta, &mut fs);
                }
                let errs = delta.check(&self.scenario.topology);
                if !errs.is_empty() {
                    return Err(TwinError::InvalidDelta(errs.join("; ")));
                }
                let seed = derive_seed(self.seed, &format!("cell:{c:?}"));
                let r = self.branch(id, &base, delta, fs, horizon, Some(seed))?;
                Ok(SweepCell {
                    coords: c,
                    values: vals,
                    seed,
                    outcome: r.outcome,
                    metrics: r.metrics,
                    report_hash: r.report_hash,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(VulnerabilityMap {
            snapshot: id.to_string(),
            axes: axes.to_vec(),
            horizon,
            frontier: frontier(&cells),
            cells,
        })
    }

    /// Anomalies in `[from, to)` against the calibration baseline.
    pub fn detect(&self, from: SimTime, to: SimTime) -> Result<TwinResult, TwinError> {
        let t = &self.scenario.twin;
        let cfg = DetectConfig {
            calibration: t.calibration,
            bucket: t.bucket,
            k: t.k,
        };
        let (baseline, anomalies) = detect_anomalies(&self.state, &cfg, from, to)?;
        Ok(TwinResult::Anomalies {
            from,
            to,
            baseline,
            anomalies,
        })
    }

    pub fn check_state(&self) -> Option<TwinResult> {
        state_liars(&self.state, self.scenario.topology.f)
    }
}

fn notable(r: &Record) -> Option<ExcerptLine> {
    let Body::Audit(ev) = &r.body else { return None };
    let summary = match ev {
        AuditEvent::FalseSuspicion { from_view, to_view, leader } => {
            format!("false suspicion of {leader}: view {from_view} -> {to_view}")
        }
        AuditEvent::Plc { detail } => format!("plc: {detail:?}"),
        AuditEvent::Injection(t) => format!("fault {} {:?} on {:?} -> {:?}", t.spec, t.action, t.src, t.dst),
        AuditEvent::ConfigChange { seq, delta, .. } => format!("config change at seq {seq}: {delta:?}"),
        AuditEvent::Replica {
            replica,
            detail: crate::consensus::ReplicaEvent::NewViewInstalled { view, .. },
        } => format!("{replica} installed view {view}"),
        _ => return None,
    };
    Some(ExcerptLine {
        topic: r.topic,
        offset: r.offset,
        summary,
    })
}
