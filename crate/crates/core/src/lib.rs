//! Deterministic BFT cyber range: a simulated OT plant ordered by a PBFT
//! cluster, a mediated streaming store, fault injection and an
//! operational twin that mirrors the run and explores what-if branches.

pub mod consensus;
pub mod fault;
pub mod net;
pub mod plant;
pub mod sim;
pub mod time_gateway;
pub mod advisory;
pub mod harness;
pub mod store;
pub mod twin;

pub use advisory::{Advisory, AdvisoryError, ManagerDecision};
pub use fault::{FaultSpec, TraceEntry, Window};
pub use harness::{build_report, Outcome, RunReport, Scenario, World, WorldError, WorldOptions};
pub use sim::{ReplicaId, SimTime};
pub use store::{Broker, ExternalAction, ExternalEvent, Record, Topic};
pub use twin::{SweepAxis, Twin, TwinError, VulnerabilityMap, WhatIfDelta, WhatIfReport};
