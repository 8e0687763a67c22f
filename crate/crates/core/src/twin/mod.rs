//! The operational twin: a read-only mirror built from the store, snapshots
//! of it, what-if branches and sweeps re-executed from the recorded inputs,
//! anomaly detection, and a divergence measure against the live system.

mod engine;

pub use engine::{Twin, TWIN_TOPICS};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::advisory::EvidenceRef;
use crate::consensus::{Digest, ReplicaEvent, Seq, View};
use crate::fault::FaultSpec;
use crate::harness::Topology;
pub use crate::harness::{Metrics, Outcome};
use crate::plant::{PlcMode, Telemetry};
use crate::sim::{dur, ReplicaId, SimTime};
use crate::store::{AuditEvent, Body, ExternalEvent, Record, Topic};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TwinError {
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(String),
    #[error("cursor mismatch on {topic}: twin at {twin}, live at {live}")]
    CursorMismatch { topic: Topic, twin: u64, live: u64 },
    #[error("record {topic}@{offset} arrived out of order (expected {expected})")]
    OutOfOrder { topic: Topic, offset: u64, expected: u64 },
    #[error("invalid delta: {0}")]
    InvalidDelta(String),
    #[error("invalid faults: {0}")]
    InvalidFaults(String),
    #[error("sweep of {cells} cells exceeds budget {budget}")]
    BudgetExceeded { cells: usize, budget: usize },
    #[error("insufficient baseline: {0}")]
    InsufficientBaseline(String),
    #[error("re-execution diverged from the snapshot (score {0})")]
    ReplayDiverged(u64),
    #[error("store: {0}")]
    Store(String),
    #[error("simulation: {0}")]
    Sim(String),
}

/// Parameter changes applied at a what-if branch point.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIfDelta {
    #[serde(default, with = "dur::option", skip_serializing_if = "Option::is_none")]
    pub timeout: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watchdog_window: Option<u32>,
    #[serde(default, with = "dur::option", skip_serializing_if = "Option::is_none")]
    pub ot_base_delay: Option<SimTime>,
    #[serde(default, with = "dur::option", skip_serializing_if = "Option::is_none")]
    pub consensus_base_delay: Option<SimTime>,
    /// Start replacing this member with the next spare.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replace: Option<ReplicaId>,
}

impl WhatIfDelta {
    pub fn check(&self, topo: &Topology) -> Vec<String> {
        let mut errs = Vec::new();
        if self.timeout == Some(SimTime::ZERO) {
            errs.push("timeout must be positive".to_string());
        }
        if self.watchdog_window == Some(0) {
            errs.push("watchdog_window must be positive".to_string());
        }
        if let Some(r) = self.replace {
            if !topo.members().contains(&r) {
                errs.push(format!("{r} is not an initial member"));
            }
            if topo.spares == 0 {
                errs.push("replacement needs a spare".to_string());
            }
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Timeout,
    /// Sets `delay` on every Delay spec of the sweep's fault template.
    LeaderDelay,
    WatchdogWindow,
    OtBaseDelay,
    ConsensusBaseDelay,
}

impl SweepParam {
    fn is_time(self) -> bool {
        self != SweepParam::WatchdogWindow
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Int(u64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    /// Durations for time parameters (integers are microseconds), counts
    /// for the watchdog window.
    pub values: Vec<AxisValue>,
}

impl SweepAxis {
    pub fn times(param: SweepParam, values: &[SimTime]) -> Self {
        SweepAxis {
            param,
            values: values.iter().map(|t| AxisValue::Text(dur::format(*t))).collect(),
        }
    }

    pub fn counts(param: SweepParam, values: &[u64]) -> Self {
        SweepAxis {
            param,
            values: values.iter().map(|v| AxisValue::Int(*v)).collect(),
        }
    }

    /// Values as integers: microseconds for time parameters.
    pub fn numbers(&self) -> Result<Vec<u64>, String> {
        if self.values.is_empty() {
            return Err(format!("axis {:?} has no values", self.param));
        }
        self.values
            .iter()
            .map(|v| match (v, self.param.is_time()) {
                (AxisValue::Int(n), _) => Ok(*n),
                (AxisValue::Text(s), true) => dur::parse(s).map(|t| t.0),
                (AxisValue::Text(s), false) => s.parse().map_err(|_| format!("`{s}` is not a count")),
            })
            .collect()
    }
}

/// Apply one sweep coordinate to a delta and fault template.
pub fn apply_axis(param: SweepParam, value: u64, delta: &mut WhatIfDelta, faults: &mut [FaultSpec]) {
    let t = SimTime(value);
    match param {
        SweepParam::Timeout => delta.timeout = Some(t),
        SweepParam::WatchdogWindow => delta.watchdog_window = Some(value as u32),
        SweepParam::OtBaseDelay => delta.ot_base_delay = Some(t),
        SweepParam::ConsensusBaseDelay => delta.consensus_base_delay = Some(t),
        SweepParam::LeaderDelay => {
            for f in faults.iter_mut() {
                if let crate::fault::FaultAction::Delay { delay } = &mut f.action {
                    *delay = t;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcerptLine {
    pub topic: Topic,
    pub offset: u64,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub snapshot: String,
    pub at: SimTime,
    pub delta: WhatIfDelta,
    pub faults: Vec<FaultSpec>,
    pub horizon: SimTime,
    pub seed: u64,
    pub outcome: Outcome,
    pub metrics: Metrics,
    pub effective_timeout: SimTime,
    pub effective_watchdog_window: u32,
    /// Hash of the branch's own run report.
    pub report_hash: String,
    /// Notable records of the branch's own event log.
    pub excerpt: Vec<ExcerptLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub coords: Vec<usize>,
    pub values: Vec<u64>,
    pub seed: u64,
    pub outcome: Outcome,
    pub metrics: Metrics,
    pub report_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityMap {
    pub snapshot: String,
    pub axes: Vec<SweepAxis>,
    pub horizon: SimTime,
    /// Row-major over `axes`.
    pub cells: Vec<SweepCell>,
    /// Index pairs of grid-adjacent cells with different outcomes.
    pub frontier: Vec<(usize, usize)>,
}

impl VulnerabilityMap {
    pub fn cell(&self, coords: &[usize]) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.coords == coords)
    }
}

/// Grid-adjacent pairs (differing by one step on one axis) whose outcomes
/// differ.
pub fn frontier(cells: &[SweepCell]) -> Vec<(usize, usize)> {
    let index: BTreeMap<&[usize], usize> = cells.iter().enumerate().map(|(i, c)| (c.coords.as_slice(), i)).collect();
    let mut out = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        for axis in 0..c.coords.len() {
            let mut n = c.coords.clone();
            n[axis] += 1;
            if let Some(&j) = index.get(n.as_slice()) {
                if cells[j].outcome != c.outcome {
                    out.push((i, j));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyMetric {
    ViewChangeRate,
    QuorumLatency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub metric: AnomalyMetric,
    pub from: SimTime,
    pub to: SimTime,
    pub value: f64,
    pub threshold: f64,
    pub evidence: Vec<EvidenceRef>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub buckets: usize,
    pub view_change_mean: f64,
    pub view_change_std: f64,
    pub latency_samples: usize,
    pub latency_mean: f64,
    pub latency_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TwinResult {
    WhatIf(WhatIfReport),
    Sweep(VulnerabilityMap),
    Anomalies {
        from: SimTime,
        to: SimTime,
        baseline: Baseline,
        anomalies: Vec<Anomaly>,
    },
    /// Replicas whose disclosed checkpoint digest disagrees with a quorum.
    StateLiars {
        checkpoint: Seq,
        replicas: Vec<ReplicaId>,
        evidence: Vec<EvidenceRef>,
    },
}

impl TwinResult {
    pub fn kind(&self) -> &'static str {
        match self {
            TwinResult::WhatIf(_) => "what_if",
            TwinResult::Sweep(_) => "sweep",
            TwinResult::Anomalies { .. } => "anomalies",
            TwinResult::StateLiars { .. } => "state_liars",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub issued_at: SimTime,
    pub latency: SimTime,
    pub offset: u64,
}

/// A twin-plane record observed in the store, re-published at the same
/// time when the run is re-executed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedOutput {
    pub at: SimTime,
    /// Gateway logical stamp, orders outputs recorded at the same time.
    #[serde(default)]
    pub logical: u64,
    pub topic: Topic,
    pub body: Body,
}

/// Everything the twin knows, derived only from stored records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub cursors: BTreeMap<Topic, u64>,
    /// Shadow decided log per replica: sequence number to entry digest.
    pub shadow: BTreeMap<ReplicaId, BTreeMap<Seq, Digest>>,
    /// PLC mode by telemetry emission time.
    pub modes: BTreeMap<SimTime, PlcMode>,
    pub plant: Option<Telemetry>,
    /// First installation of each view: time and audit offset.
    pub view_installs: BTreeMap<View, (SimTime, u64)>,
    pub latencies: Vec<LatencySample>,
    /// Disclosed checkpoint digests with their audit offsets.
    pub checkpoint_reports: BTreeMap<Seq, BTreeMap<ReplicaId, (Digest, u64)>>,
    pub externals: Vec<ExternalEvent>,
    pub outputs: Vec<RecordedOutput>,
    pub last_real: SimTime,
}

impl TwinState {
    pub fn cursor(&self, t: Topic) -> u64 {
        self.cursors.get(&t).copied().unwrap_or(0)
    }
}

/// Fold one record into the mirror. Records of a topic must arrive in
/// offset order.
pub fn ingest(state: &mut TwinState, rec: &Record) -> Result<(), TwinError> {
    let expected = state.cursor(rec.topic);
    if rec.offset != expected {
        return Err(TwinError::OutOfOrder {
            topic: rec.topic,
            offset: rec.offset,
            expected,
        });
    }
    state.cursors.insert(rec.topic, expected + 1);
    state.last_real = state.last_real.max(rec.stamp.real);
    let t = rec.stamp.real;
    match &rec.body {
        Body::Telemetry(tel) => {
            state.modes.insert(t, tel.mode);
            state.plant = Some(tel.clone());
        }
        Body::Audit(AuditEvent::Decision { replica, seq, digest, .. }) => {
            state.shadow.entry(*replica).or_default().insert(*seq, *digest);
        }
        Body::Audit(AuditEvent::Replica { replica, detail }) => match detail {
            ReplicaEvent::StateTransferred { entries } => {
                let log = state.shadow.entry(*replica).or_default();
                for (s, d) in entries {
                    log.insert(*s, *d);
                }
            }
            ReplicaEvent::NewViewInstalled { view, .. } => {
                state.view_installs.entry(*view).or_insert((t, rec.offset));
            }
            _ => {}
        },
        Body::Audit(AuditEvent::ManagerConfirmed { issued_at, latency, .. }) => {
            state.latencies.push(LatencySample {
                issued_at: *issued_at,
                latency: *latency,
                offset: rec.offset,
            });
        }
        Body::Audit(AuditEvent::CheckpointReport { replica, seq, digest }) => {
            state
                .checkpoint_reports
                .entry(*seq)
                .or_default()
                .insert(*replica, (*digest, rec.offset));
        }
        Body::External(e) => state.externals.push(e.clone()),
        Body::TwinResult(_) | Body::Advisory(_) => state.outputs.push(RecordedOutput {
            at: t,
            logical: rec.stamp.logical,
            topic: rec.topic,
            body: rec.body.clone(),
        }),
        _ => {}
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub at: SimTime,
    pub cursors: BTreeMap<Topic, u64>,
}

/// Content-addressed snapshot id.
pub fn snapshot_id(state: &TwinState) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(state).expect("state encodes")))
}

/// Ground truth captured from the running system for fidelity checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveDigest {
    pub cursors: BTreeMap<Topic, u64>,
    pub logs: BTreeMap<ReplicaId, BTreeMap<Seq, Digest>>,
    pub modes: BTreeMap<SimTime, PlcMode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum DivergencePoint {
    Log { replica: ReplicaId, seq: Seq },
    Mode { time: SimTime },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    /// Mismatching entries from the first divergence onward.
    pub score: u64,
    pub first: Vec<DivergencePoint>,
    pub compared: u64,
}

/// Compare the mirror with the live system at matching cursors.
pub fn divergence(state: &TwinState, live: &LiveDigest) -> Result<Divergence, TwinError> {
    for topic in [Topic::OtTelemetry, Topic::OtAudit] {
        let (twin, l) = (state.cursor(topic), live.cursors.get(&topic).copied().unwrap_or(0));
        if twin != l {
            return Err(TwinError::CursorMismatch { topic, twin, live: l });
        }
    }
    let mut out = Divergence::default();
    let replicas: BTreeSet<ReplicaId> = state.shadow.keys().chain(live.logs.keys()).copied().collect();
    let empty = BTreeMap::new();
    for r in replicas {
        let a = state.shadow.get(&r).unwrap_or(&empty);
        let b = live.logs.get(&r).unwrap_or(&empty);
        let seqs: BTreeSet<Seq> = a.keys().chain(b.keys()).copied().collect();
        let mut diverged = false;
        for s in seqs {
            out.compared += 1;
            if !diverged && a.get(&s) != b.get(&s) {
                diverged = true;
                out.first.push(DivergencePoint::Log { replica: r, seq: s });
            }
            if diverged {
                out.score += 1;
            }
        }
    }
    let mut diverged = false;
    for (t, mode) in &state.modes {
        out.compared += 1;
        if !diverged && live.modes.get(t) != Some(mode) {
            diverged = true;
            out.first.push(DivergencePoint::Mode { time: *t });
        }
        if diverged {
            out.score += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub calibration: SimTime,
    pub bucket: SimTime,
    pub k: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Baseline statistics from the calibration period.
pub fn baseline(state: &TwinState, cfg: &DetectConfig) -> Result<Baseline, TwinError> {
    if cfg.bucket == SimTime::ZERO || cfg.calibration < cfg.bucket.mul(2) {
        return Err(TwinError::InsufficientBaseline(
            "calibration period shorter than two buckets".into(),
        ));
    }
    if state.last_real < cfg.calibration {
        return Err(TwinError::InsufficientBaseline(format!(
            "observed up to {} of a {} calibration period",
            state.last_real, cfg.calibration
        )));
    }
    let nb = (cfg.calibration.0 / cfg.bucket.0) as usize;
    let mut counts = vec![0.0; nb];
    for (t, _) in state.view_installs.values() {
        let i = (t.0 / cfg.bucket.0) as usize;
        if i < nb {
            counts[i] += 1.0;
        }
    }
    let (vm, vs) = mean_std(&counts);
    let lat: Vec<f64> = state
        .latencies
        .iter()
        .filter(|s| s.issued_at < cfg.calibration)
        .map(|s| s.latency.0 as f64)
        .collect();
    let (lm, ls) = if lat.len() >= 2 { mean_std(&lat) } else { (0.0, 0.0) };
    Ok(Baseline {
        buckets: nb,
        view_change_mean: vm,
        view_change_std: vs,
        latency_samples: lat.len(),
        latency_mean: lm,
        latency_std: ls,
    })
}

/// Flag buckets in `[from, to)` whose view-change count or mean quorum
/// latency exceeds the calibration mean by more than `k` standard
/// deviations.
pub fn detect_anomalies(
    state: &TwinState,
    cfg: &DetectConfig,
    from: SimTime,
    to: SimTime,
) -> Result<(Baseline, Vec<Anomaly>), TwinError> {
    let base = baseline(state, cfg)?;
    let b = cfg.bucket.0;
    let vc_threshold = base.view_change_mean + cfg.k * base.view_change_std;
    let lat_threshold = base.latency_mean + cfg.k * base.latency_std;
    let mut out = Vec::new();
    let mut start = from.max(cfg.calibration).0 / b * b;
    while start < to.0 {
        let (lo, hi) = (SimTime(start), SimTime(start + b));
        let vcs: Vec<u64> = state
            .view_installs
            .values()
            .filter(|(t, _)| *t >= lo && *t < hi)
            .map(|(_, o)| *o)
            .collect();
        let count = vcs.len() as f64;
        if count > 0.0 && count > vc_threshold {
            out.push(Anomaly {
                metric: AnomalyMetric::ViewChangeRate,
                from: lo,
                to: hi,
                value: count,
                threshold: vc_threshold,
                evidence: vcs.iter().map(|o| EvidenceRef { topic: Topic::OtAudit, offset: *o }).collect(),
            });
        }
        if base.latency_samples >= 2 {
            let samples: Vec<&LatencySample> = state
                .latencies
                .iter()
                .filter(|s| s.issued_at >= lo && s.issued_at < hi)
                .collect();
            if !samples.is_empty() {
                let mean = samples.iter().map(|s| s.latency.0 as f64).sum::<f64>() / samples.len() as f64;
                if mean > lat_threshold {
                    out.push(Anomaly {
                        metric: AnomalyMetric::QuorumLatency,
                        from: lo,
                        to: hi,
                        value: mean,
                        threshold: lat_threshold,
                        evidence: samples
                            .iter()
                            .map(|s| EvidenceRef { topic: Topic::OtAudit, offset: s.offset })
                            .collect(),
                    });
                }
            }
        }
        start += b;
    }
    Ok((base, out))
}

/// Replicas whose disclosed digest for the latest commonly reported
/// checkpoint differs from a digest reported by at least `f + 1` others.
pub fn state_liars(state: &TwinState, f: usize) -> Option<TwinResult> {
    for (seq, reports) in state.checkpoint_reports.iter().rev() {
        let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
        for (d, _) in reports.values() {
            *tally.entry(*d).or_default() += 1;
        }
        let Some((agreed, n)) = tally.iter().max_by_key(|(_, n)| **n) else {
            continue;
        };
        if *n < f + 1 {
            continue;
        }
        let liars: Vec<(ReplicaId, u64)> = reports
            .iter()
            .filter(|(_, (d, _))| d != agreed)
            .map(|(r, (_, o))| (*r, *o))
            .collect();
        if liars.is_empty() {
            return None;
        }
        return Some(TwinResult::StateLiars {
            checkpoint: *seq,
            replicas: liars.iter().map(|(r, _)| *r).collect(),
            evidence: liars
                .iter()
                .map(|(_, o)| EvidenceRef { topic: Topic::OtAudit, offset: *o })
                .collect(),
        });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(b: u8) -> Digest {
        Digest([b; 32])
    }

    #[test]
    fn divergence_counts_from_first_mismatch() {
        let mut st = TwinState::default();
        let mut live = LiveDigest::default();
        let log: BTreeMap<Seq, Digest> = (1..=5).map(|s| (s, d(s as u8))).collect();
        st.shadow.insert(ReplicaId(0), log.clone());
        let mut bad = log.clone();
        bad.insert(3, d(99));
        live.logs.insert(ReplicaId(0), bad);
        let r = divergence(&st, &live).unwrap();
        assert_eq!(r.score, 3);
        assert_eq!(r.first, vec![DivergencePoint::Log { replica: ReplicaId(0), seq: 3 }]);
        live.logs.insert(ReplicaId(0), log);
        assert_eq!(divergence(&st, &live).unwrap().score, 0);
        live.cursors.insert(Topic::OtAudit, 4);
        assert!(matches!(divergence(&st, &live), Err(TwinError::CursorMismatch { .. })));
    }

    #[test]
    fn baseline_needs_calibration() {
        let cfg = DetectConfig {
            calibration: SimTime::from_secs(2),
            bucket: SimTime::from_millis(500),
            k: 3.0,
        };
        let mut st = TwinState {
            last_real: SimTime::from_secs(1),
            ..TwinState::default()
        };
        assert!(matches!(baseline(&st, &cfg), Err(TwinError::InsufficientBaseline(_))));
        st.last_real = SimTime::from_secs(4);
        st.view_installs.insert(1, (SimTime::from_millis(100), 7));
        st.view_installs.insert(2, (SimTime::from_millis(2600), 8));
        st.view_installs.insert(3, (SimTime::from_millis(2700), 9));
        let (b, found) = detect_anomalies(&st, &cfg, SimTime::ZERO, SimTime::from_secs(4)).unwrap();
        assert_eq!(b.buckets, 4);
        assert_eq!(b.view_change_mean, 0.25);
        // sigma = sqrt(3/16); threshold = 0.25 + 3 * 0.433 = 1.549
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].from, SimTime::from_millis(2500));
        assert_eq!(found[0].value, 2.0);
    }

    #[test]
    fn liars_found_against_quorum() {
        let mut st = TwinState::default();
        let reports: BTreeMap<ReplicaId, (Digest, u64)> =
            [(0, d(1)), (1, d(1)), (2, d(9)), (3, d(1))].into_iter().map(|(r, x)| (ReplicaId(r), (x, r as u64))).collect();
        st.checkpoint_reports.insert(10, reports);
        match state_liars(&st, 1) {
            Some(TwinResult::StateLiars { replicas, checkpoint, .. }) => {
                assert_eq!(checkpoint, 10);
                assert_eq!(replicas, vec![ReplicaId(2)]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frontier_pairs() {
        let mk = |c: Vec<usize>, o| SweepCell {
            coords: c,
            values: vec![],
            seed: 0,
            outcome: o,
            metrics: Metrics::default(),
            report_hash: String::new(),
        };
        let cells = vec![
            mk(vec![0, 0], Outcome::SafeLive),
            mk(vec![0, 1], Outcome::FalseSuspicionStorm),
            mk(vec![1, 0], Outcome::SafeLive),
            mk(vec![1, 1], Outcome::SafeLive),
        ];
        assert_eq!(frontier(&cells), vec![(0, 1), (1, 3)]);
    }
}
