use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::sim::{ComponentId, ReplicaId, SimTime};

pub type View = u64;
pub type Seq = u64;

/// SHA-256 digest. Hex in human-readable encodings, raw bytes otherwise.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    /// Digest of the empty decided log.
    pub fn empty_log() -> Digest {
        Digest::of(b"")
    }

    /// Extend a rolling log digest with one decided entry.
    pub fn chain(&self, seq: Seq, entry: &Digest) -> Digest {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(seq.to_le_bytes());
        h.update(entry.0);
        Digest(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&self.to_hex())
        } else {
            self.0.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
            let arr: [u8; 32] = bytes
                .try_into()
                .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
            Ok(Digest(arr))
        } else {
            Ok(Digest(<[u8; 32]>::deserialize(d)?))
        }
    }
}

/// Tunable parameters a configuration command may change. Message bodies
/// are bincode, so no field may be skipped when serializing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDelta {
    #[serde(default)]
    pub timeout: Option<SimTime>,
    #[serde(default)]
    pub watchdog_window: Option<u32>,
    #[serde(default)]
    pub ot_base_delay: Option<SimTime>,
}

impl ConfigDelta {
    pub fn is_empty(&self) -> bool {
        self.timeout.is_none() && self.watchdog_window.is_none() && self.ot_base_delay.is_none()
    }
}

/// Supervisory command ordered by the cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Noop,
    /// Target tank level in thousandths of a unit.
    Setpoint { level_milli: i64 },
    Configure {
        delta: ConfigDelta,
        advisory: Option<u64>,
    },
    /// A spare starts following the log as a non-voting learner.
    Join { replica: ReplicaId },
    /// Atomically swap a member for a caught-up learner.
    Replace {
        old: ReplicaId,
        new: ReplicaId,
        advisory: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub client: ComponentId,
    pub req_id: u64,
    pub command: Command,
}

impl Request {
    pub fn noop() -> Request {
        Request {
            client: ComponentId::Manager,
            req_id: 0,
            command: Command::Noop,
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self.command, Command::Noop)
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&bincode::serialize(self).expect("request encodes"))
    }
}

/// Parameters shared by every replica of a cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub n: usize,
    pub f: usize,
    /// Base deadline for each protocol phase.
    pub timeout: SimTime,
    pub checkpoint_interval: u64,
    #[serde(default = "default_pipeline")]
    pub pipeline_depth: usize,
}

fn default_pipeline() -> usize {
    1
}

impl ConsensusConfig {
    pub fn new(f: usize, timeout: SimTime) -> Self {
        ConsensusConfig {
            n: 3 * f + 1,
            f,
            timeout,
            checkpoint_interval: 10,
            pipeline_depth: 1,
        }
    }

    pub fn validate(&self) -> Result<(), super::ConsensusError> {
        super::quorum_threshold(self.n, self.f)?;
        if self.timeout.0 == 0 {
            return Err(super::ConsensusError::InvalidConfig(
                "timeout must be positive".into(),
            ));
        }
        if self.checkpoint_interval == 0 || self.pipeline_depth == 0 {
            return Err(super::ConsensusError::InvalidConfig(
                "checkpoint interval and pipeline depth must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }
}

/// A sequence number decided by commit quorum at one replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub replica: ReplicaId,
    pub seq: Seq,
    pub request: Request,
    pub digest: Digest,
    pub view: View,
    pub quorum: Vec<ReplicaId>,
    pub decided_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PrePrepare,
    Prepare,
    Commit,
    NewView,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::PrePrepare => "pre-prepare",
            Phase::Prepare => "prepare",
            Phase::Commit => "commit",
            Phase::NewView => "new-view",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_hex_roundtrip_in_json() {
        let d = Digest::of(b"abc");
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s.len(), 66);
        assert_eq!(serde_json::from_str::<Digest>(&s).unwrap(), d);
    }

    #[test]
    fn chain_is_order_sensitive() {
        let a = Digest::of(b"a");
        let b = Digest::of(b"b");
        let x = Digest::empty_log().chain(1, &a).chain(2, &b);
        let y = Digest::empty_log().chain(1, &b).chain(2, &a);
        assert_ne!(x, y);
    }

    #[test]
    fn request_digest_covers_command() {
        let mut r = Request {
            client: ComponentId::Manager,
            req_id: 1,
            command: Command::Setpoint { level_milli: 5000 },
        };
        let d = r.digest();
        r.command = Command::Setpoint { level_milli: 5001 };
        assert_ne!(d, r.digest());
    }
}
