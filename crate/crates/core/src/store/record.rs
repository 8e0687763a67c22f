use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::advisory::{Advisory, ManagerDecision};
use crate::consensus::{Command, ConfigDelta, Digest, ReplicaEvent, Seq, View};
use crate::fault::{FaultSpec, TraceEntry};
use crate::plant::{PlcEvent, SupervisoryCommand, Telemetry};
use crate::sim::{dur, ReplicaId, SimTime};
use crate::time_gateway::{CanonicalTimestamp, Stampable};
use crate::twin::{TwinResult, WhatIfDelta};

use super::StoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Topic {
    OtTelemetry,
    OtAudit,
    OtActuation,
    TwinResults,
    TwinAdvisory,
    SiemEvents,
    /// Human and console actions, logged so interactive runs replay.
    RangeExternal,
}

impl Topic {
    pub const ALL: [Topic; 7] = [
        Topic::OtTelemetry,
        Topic::OtAudit,
        Topic::OtActuation,
        Topic::TwinResults,
        Topic::TwinAdvisory,
        Topic::SiemEvents,
        Topic::RangeExternal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::OtTelemetry => "ot.telemetry",
            Topic::OtAudit => "ot.audit",
            Topic::OtActuation => "ot.actuation",
            Topic::TwinResults => "twin.results",
            Topic::TwinAdvisory => "twin.advisory",
            Topic::SiemEvents => "siem.events",
            Topic::RangeExternal => "range.external",
        }
    }

    pub fn is_ot(self) -> bool {
        self.as_str().starts_with("ot.")
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topic {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, StoreError> {
        Topic::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| StoreError::UnknownTopic(s.to_string()))
    }
}

impl Serialize for Topic {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Topic {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiemEvent {
    pub severity: Severity,
    pub category: String,
    pub summary: String,
    pub source_topic: Topic,
    pub source_offset: u64,
}

/// Everything the harness and components record on `ot.audit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    RunStarted {
        scenario_hash: String,
        seed: u64,
        f: usize,
        members: Vec<ReplicaId>,
        spares: Vec<ReplicaId>,
        #[serde(with = "dur")]
        timeout: SimTime,
        /// Replicas bound to byzantine specs in the scenario.
        byzantine: Vec<ReplicaId>,
        liveness_factor: u64,
        storm_rate: f64,
        safety_bounds: (f64, f64),
        auto_confirm: bool,
    },
    Replica {
        replica: ReplicaId,
        detail: ReplicaEvent,
    },
    Decision {
        replica: ReplicaId,
        seq: Seq,
        req_id: u64,
        digest: Digest,
        view: View,
        quorum: usize,
    },
    /// A replica's checkpoint digest as disclosed to the audit plane.
    CheckpointReport {
        replica: ReplicaId,
        seq: Seq,
        digest: Digest,
    },
    Injection(TraceEntry),
    /// A view change against a leader that was not faulty.
    FalseSuspicion {
        from_view: View,
        to_view: View,
        leader: ReplicaId,
    },
    Plc {
        detail: PlcEvent,
    },
    ManagerRequest {
        req_id: u64,
        command: Command,
        retransmit: bool,
    },
    ManagerConfirmed {
        req_id: u64,
        seq: Seq,
        command: Command,
        issued_at: SimTime,
        latency: SimTime,
    },
    ManagerDecision(ManagerDecision),
    /// A human (or auto-confirm) answer to a deferred advisory.
    AdvisoryConfirmed {
        advisory: u64,
        approve: bool,
        operator: String,
    },
    /// A manager-confirmed configuration change is live.
    ConfigChange {
        seq: Seq,
        delta: ConfigDelta,
        advisory: Option<u64>,
    },
    ExternalApplied {
        seq: u64,
    },
    RunCompleted {
        at: SimTime,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ExternalAction {
    InjectFault { spec: FaultSpec },
    Confirm {
        advisory: u64,
        approve: bool,
        #[serde(default)]
        rationale: String,
    },
    Stop,
    /// What-if branch point: parameter delta, extra faults with windows
    /// relative to `at`, and an optional RNG reseed.
    Branch {
        #[serde(default)]
        delta: WhatIfDelta,
        #[serde(default)]
        faults: Vec<FaultSpec>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

/// A human or console action entering the simulation at `at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvent {
    pub seq: u64,
    #[serde(with = "dur")]
    pub at: SimTime,
    pub principal: String,
    #[serde(flatten)]
    pub action: ExternalAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Body {
    Telemetry(Telemetry),
    Audit(AuditEvent),
    Actuation(SupervisoryCommand),
    TwinResult(TwinResult),
    Advisory(Advisory),
    Siem(SiemEvent),
    External(ExternalEvent),
}

impl Body {
    /// Per-topic structural validation: the body variant must belong to the
    /// topic and numeric fields must be finite.
    pub fn check(&self, topic: Topic) -> Result<(), String> {
        let ok = matches!(
            (topic, self),
            (Topic::OtTelemetry, Body::Telemetry(_))
                | (Topic::OtAudit, Body::Audit(_))
                | (Topic::OtActuation, Body::Actuation(_))
                | (Topic::TwinResults, Body::TwinResult(_))
                | (Topic::TwinAdvisory, Body::Advisory(_))
                | (Topic::SiemEvents, Body::Siem(_))
                | (Topic::RangeExternal, Body::External(_))
        );
        if !ok {
            return Err(format!("body type `{}` not accepted", self.type_name()));
        }
        match self {
            Body::Telemetry(t) => {
                for (name, v) in [("level", t.level), ("valve", t.valve), ("setpoint", t.setpoint)] {
                    if !v.is_finite() {
                        return Err(format!("telemetry {name} is not finite"));
                    }
                }
            }
            Body::Actuation(c) if !c.setpoint.is_finite() => {
                return Err("actuation setpoint is not finite".into());
            }
            Body::Advisory(a) if a.evidence.is_empty() => {
                return Err("advisory without evidence".into());
            }
            _ => {}
        }
        Ok(())
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Telemetry(_) => "telemetry",
            Body::Audit(_) => "audit",
            Body::Actuation(_) => "actuation",
            Body::TwinResult(_) => "twin_result",
            Body::Advisory(_) => "advisory",
            Body::Siem(_) => "siem",
            Body::External(_) => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub topic: Topic,
    pub offset: u64,
    pub stamp: CanonicalTimestamp,
    pub producer: String,
    /// Transport delay from stamp to gateway arrival.
    #[serde(default)]
    pub delay: SimTime,
    /// Released after a later-stamped record on the same path.
    #[serde(default)]
    pub late: bool,
    pub body: Body,
    /// Hex tag over the record without this field.
    #[serde(default)]
    pub auth: String,
}

impl Record {
    /// Canonical bytes covered by the authenticator.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let unsigned = Record {
            auth: String::new(),
            ..self.clone()
        };
        serde_json::to_vec(&unsigned).expect("record encodes")
    }
}

impl Stampable for Record {
    fn stamp(&self) -> Option<&CanonicalTimestamp> {
        Some(&self.stamp)
    }

    fn set_stamp(&mut self, ts: CanonicalTimestamp) {
        self.stamp = ts;
    }
}
