//! Run classification and run reports, derived only from stored records.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::advisory::{Advisory, Confirmation, ManagerDecision};
use crate::consensus::{Digest, ReplicaEvent, Seq};
use crate::fault::{byzantine_set, FaultSpec, TraceEntry};
use crate::plant::PlcEvent;
use crate::sim::{ReplicaId, SimTime};
use crate::store::{AuditEvent, Body, Broker, ExternalAction, Topic};
use crate::twin::TwinResult;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("event log has no run-started record")]
    MissingRunStarted,
}

/// Run or branch classification, in priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    SafeLive,
    SafetyViolation,
    FalseSuspicionStorm,
    LivenessViolation,
    FailSafeEngaged,
}

impl Outcome {
    pub fn is_violation(self) -> bool {
        self != Outcome::SafeLive
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Requests first issued in the window.
    pub requests: u64,
    pub confirmed: u64,
    /// Distinct sequence numbers decided by correct replicas in the window.
    pub decisions: u64,
    /// Distinct views first installed in the window.
    pub view_changes: u64,
    pub false_suspicions: u64,
    pub deadline_violations: u64,
    pub plant_excursions: u64,
    pub fail_safe: u64,
    /// Sequence numbers at which correct replicas decided different digests.
    pub safety_conflicts: u64,
    /// Requests not confirmed within the liveness bound.
    pub late_requests: u64,
    pub max_latency: SimTime,
    pub max_level: f64,
}

impl Metrics {
    pub fn false_suspicion_rate(&self) -> f64 {
        self.false_suspicions as f64 / self.requests.max(1) as f64
    }
}

/// Run parameters recorded at start.
#[derive(Clone, Debug, PartialEq)]
pub struct RunParams {
    pub scenario_hash: String,
    pub seed: u64,
    pub f: usize,
    pub timeout: SimTime,
    pub byzantine: BTreeSet<ReplicaId>,
    pub liveness_factor: u64,
    pub storm_rate: f64,
    pub safety_bounds: (f64, f64),
    pub auto_confirm: bool,
}

pub fn run_params(broker: &Broker) -> Result<RunParams, ReportError> {
    let first = broker.get(Topic::OtAudit, 0).ok_or(ReportError::MissingRunStarted)?;
    match &first.body {
        Body::Audit(AuditEvent::RunStarted {
            scenario_hash,
            seed,
            f,
            timeout,
            byzantine,
            liveness_factor,
            storm_rate,
            safety_bounds,
            auto_confirm,
            ..
        }) => Ok(RunParams {
            scenario_hash: scenario_hash.clone(),
            seed: *seed,
            f: *f,
            timeout: *timeout,
            byzantine: byzantine.iter().copied().collect(),
            liveness_factor: *liveness_factor,
            storm_rate: *storm_rate,
            safety_bounds: *safety_bounds,
            auto_confirm: *auto_confirm,
        }),
        _ => Err(ReportError::MissingRunStarted),
    }
}

/// Classify `[from, to]` of a recorded run.
pub fn classify(broker: &Broker, from: SimTime, to: SimTime) -> Result<(Outcome, Metrics), ReportError> {
    let p = run_params(broker)?;
    let in_window = |t: SimTime| t >= from && t <= to;

    let mut injected: Vec<FaultSpec> = Vec::new();
    let mut timeouts: Vec<(SimTime, SimTime)> = vec![(SimTime::ZERO, p.timeout)];
    for r in broker.records(Topic::RangeExternal) {
        if let Body::External(e) = &r.body {
            match &e.action {
                ExternalAction::InjectFault { spec } => injected.push(spec.clone()),
                ExternalAction::Branch { delta, faults, .. } => {
                    injected.extend(faults.iter().cloned());
                    if let Some(t) = delta.timeout {
                        timeouts.push((r.stamp.real, t));
                    }
                }
                _ => {}
            }
        }
    }
    let mut byz = p.byzantine.clone();
    byz.extend(byzantine_set(&injected));

    let mut m = Metrics::default();
    let mut digests: BTreeMap<Seq, BTreeMap<Digest, SimTime>> = BTreeMap::new();
    let mut decided_in_window: BTreeSet<Seq> = BTreeSet::new();
    let mut views: BTreeMap<u64, SimTime> = BTreeMap::new();
    let mut issued: BTreeMap<u64, SimTime> = BTreeMap::new();
    let mut confirmed: BTreeMap<u64, SimTime> = BTreeMap::new();
    for r in broker.records(Topic::OtAudit) {
        let t = r.stamp.real;
        let Body::Audit(ev) = &r.body else { continue };
        match ev {
            AuditEvent::Decision { replica, seq, digest, .. } if !byz.contains(replica) => {
                digests.entry(*seq).or_default().entry(*digest).or_insert(t);
                if in_window(t) {
                    decided_in_window.insert(*seq);
                }
            }
            AuditEvent::Replica { replica, detail } => match detail {
                ReplicaEvent::StateTransferred { entries } if !byz.contains(replica) => {
                    for (s, d) in entries {
                        digests.entry(*s).or_default().entry(*d).or_insert(t);
                    }
                }
                ReplicaEvent::NewViewInstalled { view, .. } => {
                    views.entry(*view).or_insert(t);
                }
                ReplicaEvent::DeadlineExpired { .. } if in_window(t) => m.deadline_violations += 1,
                _ => {}
            },
            AuditEvent::FalseSuspicion { .. } if in_window(t) => m.false_suspicions += 1,
            AuditEvent::Plc {
                detail: PlcEvent::FailSafeEngaged { .. },
            } if in_window(t) => m.fail_safe += 1,
            AuditEvent::ManagerRequest {
                req_id,
                retransmit: false,
                ..
            } => {
                issued.insert(*req_id, t);
            }
            AuditEvent::ManagerConfirmed { req_id, .. } => {
                confirmed.insert(*req_id, t);
            }
            AuditEvent::ConfigChange { delta, .. } => {
                if let Some(to) = delta.timeout {
                    timeouts.push((t, to));
                }
            }
            _ => {}
        }
    }
    timeouts.sort_by_key(|(t, _)| *t);
    let bound_at = |t: SimTime| {
        let timeout = timeouts
            .iter()
            .rev()
            .find(|(at, _)| *at <= t)
            .map_or(p.timeout, |(_, x)| *x);
        timeout.mul(p.liveness_factor)
    };

    m.decisions = decided_in_window.len() as u64;
    m.view_changes = views.values().filter(|t| in_window(**t)).count() as u64;
    m.safety_conflicts = digests
        .values()
        .filter(|ds| ds.len() > 1 && ds.values().any(|t| *t >= from))
        .count() as u64;
    for (req, at) in issued.iter().filter(|(_, t)| in_window(**t)) {
        m.requests += 1;
        let bound = bound_at(*at);
        match confirmed.get(req) {
            Some(c) => {
                m.confirmed += 1;
                let lat = c.saturating_sub(*at);
                m.max_latency = m.max_latency.max(lat);
                if lat > bound {
                    m.late_requests += 1;
                }
            }
            None => {
                if to.saturating_sub(*at) > bound {
                    m.late_requests += 1;
                }
            }
        }
    }
    let (lo, hi) = p.safety_bounds;
    for r in broker.records(Topic::OtTelemetry) {
        if let Body::Telemetry(tel) = &r.body {
            if in_window(r.stamp.real) {
                m.max_level = m.max_level.max(tel.level);
                if !(lo..=hi).contains(&tel.level) {
                    m.plant_excursions += 1;
                }
            }
        }
    }

    let outcome = if m.safety_conflicts > 0 {
        Outcome::SafetyViolation
    } else if m.false_suspicions > 0 && m.false_suspicion_rate() > p.storm_rate {
        Outcome::FalseSuspicionStorm
    } else if m.late_requests > 0 {
        Outcome::LivenessViolation
    } else if m.fail_safe > 0 {
        Outcome::FailSafeEngaged
    } else {
        Outcome::SafeLive
    };
    Ok((outcome, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinOutputSummary {
    pub offset: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub auto_confirm: bool,
    pub from: SimTime,
    pub to: SimTime,
    pub outcome: Outcome,
    pub metrics: Metrics,
    pub heads: BTreeMap<Topic, u64>,
    /// Hash of every stored record.
    pub event_log_hash: String,
    /// Last decided sequence number per replica (from audit records).
    pub last_decided: BTreeMap<ReplicaId, Seq>,
    pub injection_trace: Vec<TraceEntry>,
    pub false_suspicions: Vec<u64>,
    pub twin_outputs: Vec<TwinOutputSummary>,
    pub advisories: Vec<Advisory>,
    pub decisions: Vec<ManagerDecision>,
    pub external_events: u64,
}

impl RunReport {
    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report encodes")))
    }

    pub fn exit_code(&self) -> i32 {
        if self.outcome.is_violation() {
            2
        } else {
            0
        }
    }
}

/// Build the report for `[from, to]` from the store alone.
pub fn build_report(broker: &Broker, from: SimTime, to: SimTime) -> Result<RunReport, ReportError> {
    let p = run_params(broker)?;
    let (outcome, metrics) = classify(broker, from, to)?;
    let mut last_decided: BTreeMap<ReplicaId, Seq> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut fs = Vec::new();
    let mut decisions: BTreeMap<u64, ManagerDecision> = BTreeMap::new();
    for r in broker.records(Topic::OtAudit) {
        let Body::Audit(ev) = &r.body else { continue };
        match ev {
            AuditEvent::Decision { replica, seq, .. } => {
                let e = last_decided.entry(*replica).or_default();
                *e = (*e).max(*seq);
            }
            AuditEvent::Injection(t) => trace.push(t.clone()),
            AuditEvent::FalseSuspicion { .. } => fs.push(r.offset),
            AuditEvent::ManagerDecision(d) => {
                decisions.insert(d.advisory, d.clone());
            }
            AuditEvent::AdvisoryConfirmed { advisory, approve, operator } => {
                if let Some(d) = decisions.get_mut(advisory) {
                    d.confirmation = Some(Confirmation {
                        approve: *approve,
                        operator: operator.clone(),
                        at: r.stamp.real,
                        rationale: String::new(),
                    });
                }
            }
            _ => {}
        }
    }
    let twin_outputs = broker
        .records(Topic::TwinResults)
        .iter()
        .filter_map(|r| match &r.body {
            Body::TwinResult(t) => Some(TwinOutputSummary {
                offset: r.offset,
                kind: t.kind().to_string(),
                outcome: match t {
                    TwinResult::WhatIf(w) => Some(w.outcome),
                    _ => None,
                },
            }),
            _ => None,
        })
        .collect();
    let advisories = broker
        .records(Topic::TwinAdvisory)
        .iter()
        .filter_map(|r| match &r.body {
            Body::Advisory(a) => Some(a.clone()),
            _ => None,
        })
        .collect();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA,
        scenario_hash: p.scenario_hash,
        seed: p.seed,
        auto_confirm: p.auto_confirm,
        from,
        to,
        outcome,
        metrics,
        heads: broker.heads(),
        event_log_hash: broker.content_hash(),
        last_decided,
        injection_trace: trace,
        false_suspicions: fs,
        twin_outputs,
        advisories,
        decisions: decisions.into_values().collect(),
        external_events: broker.head(Topic::RangeExternal),
    })
}
