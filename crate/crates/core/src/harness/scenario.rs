//! Scenario files: TOML descriptions of topology, plant, faults, twin jobs
//! and scripted external actions.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::advisory::Policy;
use crate::consensus::{ConsensusConfig, ConsensusError};
use crate::fault::{validate_specs, FaultAction, FaultError, FaultSpec};
use crate::net::{Lane, NetError};
use crate::plant::{PlantError, PlantState};
use crate::sim::{dur, ComponentId, ReplicaId, SimTime};
use crate::store::ExternalAction;
use crate::twin::{SweepAxis, WhatIfDelta};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("consensus: {0}")]
    Consensus(#[from] ConsensusError),
    #[error("lane `{lane}`: {err}")]
    Lane { lane: &'static str, err: NetError },
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("fault: {0}")]
    Fault(#[from] FaultError),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Every problem found in a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<ScenarioError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lanes {
    pub consensus: Lane,
    pub ot: Lane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub f: usize,
    /// Provisioned spares from the diversified pool, ids `3f+1..`.
    #[serde(default)]
    pub spares: u32,
    pub lanes: Lanes,
}

impl Topology {
    pub fn members(&self) -> Vec<ReplicaId> {
        (0..(3 * self.f + 1) as u32).map(ReplicaId).collect()
    }

    pub fn spare_ids(&self) -> Vec<ReplicaId> {
        let n = (3 * self.f + 1) as u32;
        (n..n + self.spares).map(ReplicaId).collect()
    }

    pub fn all_replicas(&self) -> Vec<ReplicaId> {
        let mut v = self.members();
        v.extend(self.spare_ids());
        v
    }
}

fn default_checkpoint() -> u64 {
    10
}

fn default_pipeline() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSettings {
    #[serde(with = "dur")]
    pub timeout: SimTime,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_pipeline")]
    pub pipeline_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlcConfig {
    #[serde(with = "dur")]
    pub cycle_period: SimTime,
    pub watchdog_window: u32,
    pub safety_bounds: (f64, f64),
    pub gain: f64,
    pub setpoint: f64,
    /// Sensor noise amplitude as a fraction of capacity.
    pub sensor_noise: Option<f64>,
}

impl Default for PlcConfig {
    fn default() -> Self {
        PlcConfig {
            cycle_period: SimTime::from_millis(100),
            watchdog_window: 5,
            safety_bounds: (0.5, 9.5),
            gain: 0.5,
            setpoint: 5.0,
            sensor_noise: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    #[serde(with = "dur")]
    pub request_interval: SimTime,
    /// Resend an undecided request after this long; defaults to twice the
    /// consensus timeout.
    #[serde(with = "dur::option", skip_serializing_if = "Option::is_none")]
    pub retransmit_after: Option<SimTime>,
    /// Setpoints issued in rotation.
    pub setpoints: Vec<f64>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            request_interval: SimTime::from_millis(100),
            retransmit_after: None,
            setpoints: vec![5.0],
        }
    }
}

fn console() -> String {
    "console".into()
}

/// An external action scripted at a fixed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedExternal {
    #[serde(with = "dur")]
    pub at: SimTime,
    #[serde(default = "console")]
    pub principal: String,
    #[serde(flatten)]
    pub action: ExternalAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobKind {
    WhatIf {
        #[serde(default)]
        delta: WhatIfDelta,
        #[serde(default)]
        faults: Vec<FaultSpec>,
        #[serde(with = "dur")]
        horizon: SimTime,
    },
    Sweep {
        axes: Vec<SweepAxis>,
        #[serde(default)]
        faults: Vec<FaultSpec>,
        #[serde(with = "dur")]
        horizon: SimTime,
        #[serde(default)]
        budget: Option<usize>,
    },
    /// Anomaly detection over everything after calibration.
    Detect,
    /// Cross-replica comparison of disclosed checkpoint digests.
    CheckState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinJob {
    #[serde(with = "dur")]
    pub at: SimTime,
    #[serde(flatten)]
    pub kind: JobKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    /// Baseline statistics come from `[0, calibration)`.
    #[serde(with = "dur")]
    pub calibration: SimTime,
    #[serde(with = "dur")]
    pub bucket: SimTime,
    pub k: f64,
    #[serde(with = "dur")]
    pub reorder_window: SimTime,
    /// Liveness bound in multiples of the consensus timeout.
    pub liveness_factor: u64,
    /// False suspicions per request above which a run is a storm.
    pub storm_rate: f64,
    /// Upper bound on sweep cells when a job sets no budget.
    pub max_cells: usize,
    pub jobs: Vec<TwinJob>,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            calibration: SimTime::from_secs(2),
            bucket: SimTime::from_millis(500),
            k: 3.0,
            reorder_window: SimTime::from_millis(10),
            liveness_factor: 10,
            storm_rate: 0.2,
            max_cells: 400,
            jobs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(with = "dur")]
    pub duration: SimTime,
    pub topology: Topology,
    #[serde(default)]
    pub plant: PlantState,
    #[serde(default)]
    pub plc: PlcConfig,
    pub consensus: ConsensusSettings,
    #[serde(default)]
    pub manager: ManagerConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub exceeds_fault_bound: bool,
    #[serde(default)]
    pub external: Vec<ScriptedExternal>,
    #[serde(default)]
    pub twin: TwinConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    #[serde(default)]
    pub auto_confirm: bool,
}

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Scenario, ScenarioError> {
        toml::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario encodes as TOML")
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("scenario encodes")))
    }

    pub fn consensus_config(&self) -> ConsensusConfig {
        ConsensusConfig {
            n: 3 * self.topology.f + 1,
            f: self.topology.f,
            timeout: self.consensus.timeout,
            checkpoint_interval: self.consensus.checkpoint_interval,
            pipeline_depth: self.consensus.pipeline_depth,
        }
    }

    pub fn retransmit_after(&self) -> SimTime {
        self.manager
            .retransmit_after
            .unwrap_or(self.consensus.timeout.mul(2))
    }

    pub fn policy(&self) -> Policy {
        self.policy
            .clone()
            .unwrap_or_else(|| Policy::for_bound(self.topology.lanes.consensus.stable_bound()))
    }

    /// Fault specs scripted for injection at run time, windows shifted to
    /// absolute time.
    pub fn injected_specs(&self) -> impl Iterator<Item = FaultSpec> + '_ {
        self.external.iter().filter_map(|e| match &e.action {
            ExternalAction::InjectFault { spec } => Some(FaultSpec {
                window: spec.window.shifted(e.at),
                ..spec.clone()
            }),
            _ => None,
        })
    }

    /// Check the whole scenario and report every problem.
    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(ScenarioError::SchemaVersion(self.schema_version));
        }
        if self.duration == SimTime::ZERO {
            errs.push(invalid("duration", "must be positive"));
        }
        if i64::try_from(self.seed).is_err() {
            errs.push(invalid("seed", "must fit a TOML integer (at most 2^63 - 1)"));
        }
        if let Err(e) = self.consensus_config().validate() {
            errs.push(e.into());
        }
        for (name, lane) in [("consensus", &self.topology.lanes.consensus), ("ot", &self.topology.lanes.ot)] {
            if let Err(err) = lane.validate() {
                errs.push(ScenarioError::Lane { lane: name, err });
            }
        }
        if let Err(e) = self.plant.validate() {
            errs.push(e.into());
        }
        errs.extend(self.check_plc());
        errs.extend(self.check_manager());

        let replicas: BTreeSet<ReplicaId> = self.topology.all_replicas().into_iter().collect();
        let mut all_specs = self.faults.clone();
        all_specs.extend(self.injected_specs());
        errs.extend(
            validate_specs(&all_specs, self.topology.f, self.exceeds_fault_bound)
                .into_iter()
                .map(ScenarioError::from),
        );
        for s in &all_specs {
            errs.extend(check_spec_refs(s, &replicas));
        }
        for (i, e) in self.external.iter().enumerate() {
            if e.at >= self.duration {
                errs.push(invalid(format!("external[{i}].at"), "after the end of the run"));
            }
        }
        errs.extend(self.check_twin(&replicas));
        if let Some(p) = &self.policy {
            if p.auto_timeout_min > p.auto_timeout_max {
                errs.push(invalid("policy", "auto_timeout_min exceeds auto_timeout_max"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errs))
        }
    }

    fn check_plc(&self) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        let p = &self.plc;
        if p.cycle_period == SimTime::ZERO {
            errs.push(invalid("plc.cycle_period", "must be positive"));
        }
        if p.watchdog_window == 0 {
            errs.push(invalid("plc.watchdog_window", "must be positive"));
        }
        let (lo, hi) = p.safety_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0 && hi <= self.plant.capacity) {
            errs.push(invalid("plc.safety_bounds", "need 0 <= low < high <= capacity"));
        }
        if !(lo..=hi).contains(&p.setpoint) {
            errs.push(invalid("plc.setpoint", "outside safety bounds"));
        }
        if !(p.gain.is_finite() && p.gain > 0.0) {
            errs.push(invalid("plc.gain", "must be positive"));
        }
        if let Some(n) = p.sensor_noise {
            if !(0.0..1.0).contains(&n) {
                errs.push(invalid("plc.sensor_noise", "must be in [0, 1)"));
            }
        }
        errs
    }

    fn check_manager(&self) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        let m = &self.manager;
        if m.request_interval == SimTime::ZERO {
            errs.push(invalid("manager.request_interval", "must be positive"));
        }
        if m.retransmit_after == Some(SimTime::ZERO) {
            errs.push(invalid("manager.retransmit_after", "must be positive"));
        }
        if m.setpoints.is_empty() {
            errs.push(invalid("manager.setpoints", "needs at least one value"));
        }
        let (lo, hi) = self.plc.safety_bounds;
        for (i, s) in m.setpoints.iter().enumerate() {
            if !(lo..=hi).contains(s) {
                errs.push(invalid(format!("manager.setpoints[{i}]"), "outside safety bounds"));
            }
        }
        errs
    }

    fn check_twin(&self, replicas: &BTreeSet<ReplicaId>) -> Vec<ScenarioError> {
        let mut errs = Vec::new();
        let t = &self.twin;
        if t.bucket == SimTime::ZERO {
            errs.push(invalid("twin.bucket", "must be positive"));
        }
        if !(t.k.is_finite() && t.k > 0.0) {
            errs.push(invalid("twin.k", "must be positive"));
        }
        if t.liveness_factor == 0 {
            errs.push(invalid("twin.liveness_factor", "must be positive"));
        }
        if !(t.storm_rate.is_finite() && t.storm_rate > 0.0) {
            errs.push(invalid("twin.storm_rate", "must be positive"));
        }
        for (i, job) in t.jobs.iter().enumerate() {
            let field = format!("twin.jobs[{i}]");
            if job.at >= self.duration {
                errs.push(invalid(&field, "scheduled after the end of the run"));
            }
            let (faults, horizon) = match &job.kind {
                JobKind::WhatIf { delta, faults, horizon } => {
                    for e in delta.check(&self.topology) {
                        errs.push(invalid(&field, e));
                    }
                    (faults, *horizon)
                }
                JobKind::Sweep { axes, faults, horizon, budget } => {
                    if axes.is_empty() {
                        errs.push(invalid(&field, "sweep needs at least one axis"));
                    }
                    for a in axes {
                        if let Err(e) = a.numbers() {
                            errs.push(invalid(&field, e));
                        }
                    }
                    if budget == &Some(0) {
                        errs.push(invalid(&field, "budget must be positive"));
                    }
                    (faults, *horizon)
                }
                JobKind::Detect | JobKind::CheckState => continue,
            };
            if horizon == SimTime::ZERO {
                errs.push(invalid(&field, "horizon must be positive"));
            }
            let mut all = self.faults.clone();
            all.extend(self.injected_specs());
            all.extend(faults.iter().cloned());
            for e in validate_specs(&all, self.topology.f, self.exceeds_fault_bound) {
                errs.push(invalid(&field, e.to_string()));
            }
            for s in faults {
                errs.extend(check_spec_refs(s, replicas));
            }
        }
        errs
    }
}

/// Bound replicas and partition members must exist.
pub fn check_spec_refs(s: &FaultSpec, replicas: &BTreeSet<ReplicaId>) -> Vec<ScenarioError> {
    let mut errs = Vec::new();
    for r in &s.bound_replicas {
        if !replicas.contains(r) {
            errs.push(FaultError::UnknownReplica(*r).into());
        }
    }
    if let FaultAction::Partition { groups } = &s.action {
        for c in groups.iter().flatten() {
            if let ComponentId::Replica(r) = c {
                if !replicas.contains(r) {
                    errs.push(FaultError::UnknownReplica(*r).into());
                }
            }
        }
    }
    errs
}
