//! Mediated publish/subscribe over an append-only, per-topic log, plus the
//! Historian and the SIEM export.
//!
//! Each topic is a directory of segment files. A segment is a sequence of
//! frames `len: u32 LE | crc32: u32 LE | payload`, where the payload is one
//! JSON-encoded [`Record`]. Segment files are named by the offset of their
//! first record.

mod broker;
mod historian;
mod policy;
mod record;
mod segment;
mod siem;

pub use broker::{Broker, BrokerConfig, ListenerId, Subscription};
pub use historian::{Historian, HistorianEntry, HistorianFilter, Verdict};
pub use policy::{AccessPolicy, Grant, Principal};
pub use record::{AuditEvent, Body, ExternalAction, ExternalEvent, Record, Severity, SiemEvent, Topic};
pub use siem::{export_siem, SiemLine};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("principal `{principal}` may not {op} `{topic}`")]
    Unauthorized {
        principal: String,
        topic: Topic,
        op: &'static str,
    },
    #[error("schema violation on `{topic}`: {reason}")]
    SchemaViolation { topic: Topic, reason: String },
    #[error("offset {from} is beyond head {head} of `{topic}`")]
    OffsetBeyondHead { topic: Topic, from: u64, head: u64 },
    #[error("range {start}..{end} out of bounds for `{topic}` (head {head})")]
    RangeOutOfBounds {
        topic: Topic,
        start: u64,
        end: u64,
        head: u64,
    },
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("evidence `{0}` does not resolve to a stored run report")]
    DanglingEvidence(String),
    #[error("corrupt segment {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("policy grants a twin-plane principal publish on `{0}`")]
    PolicyViolation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}
