//! Simulated network: a deterministic OT lane and partially synchronous
//! lanes, keyed message authenticators, partitions, and the interception
//! hook through which every adversarial perturbation enters.

mod auth;
mod lane;
mod network;

pub use auth::{AuthTag, Keyring};
pub use lane::{DelayDistribution, Lane, LaneKind};
pub use network::{
    Envelope, InterceptAction, Interceptor, LaneId, Network, NoInterception, SendContext,
    SendOutcome,
};

use thiserror::Error;

use crate::sim::ComponentId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("endpoint {0} not registered on lane `{1}`")]
    UnknownEndpoint(ComponentId, String),
    #[error("unknown lane `{0}`")]
    UnknownLane(String),
    #[error("partition groups overlap on {0}")]
    OverlappingGroups(ComponentId),
    #[error("invalid lane: {0}")]
    InvalidLane(String),
}
