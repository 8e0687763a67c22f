//! Discrete-event core: simulated time, Lamport clocks, the event scheduler
//! and named RNG streams. Everything else in the crate is driven from here.

pub mod dur;
mod ids;
mod rng;
mod scheduler;
mod time;

pub use ids::{ComponentId, ReplicaId};
pub use rng::{derive_seed, RngRegistry, RngStream};
pub use scheduler::{Event, EventId, Provenance, Scheduler};
pub use time::{LogicalClock, SimTime};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event due at {due} is before current time {now}")]
    PastDeadline { due: SimTime, now: SimTime },
    #[error("unknown rng stream `{0}`")]
    UnknownStream(String),
}
