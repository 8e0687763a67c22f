//! Scenario execution: the simulated world, run classification and reports.

mod report;
mod scenario;
mod world;

pub use report::{build_report, classify, run_params, Metrics, Outcome, ReportError, RunParams, RunReport, TwinOutputSummary, REPORT_SCHEMA};
pub use scenario::{
    check_spec_refs, ConsensusSettings, JobKind, Lanes, ManagerConfig, PlcConfig, Scenario, ScenarioError,
    ScriptedExternal, Topology, TwinConfig, TwinJob, ValidationErrors, SCHEMA_VERSION,
};
pub use world::{World, WorldError, WorldOptions, CONSENSUS_LANE, OT_LANE};
