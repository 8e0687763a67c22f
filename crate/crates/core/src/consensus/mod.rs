//! Byzantine fault tolerant ordering of supervisory commands.
//!
//! Three-phase agreement (pre-prepare, prepare, commit) with a rotating
//! leader, signed view changes, periodic checkpoints and state transfer.
//! Replicas are pure state machines: the caller delivers messages and
//! timer expirations and routes the returned [`Output`].

mod cert;
mod message;
mod replica;
mod types;

pub use cert::{reproposals, Quorum};
pub use message::{
    CheckpointCert, ConsensusMessage, MessageKind, NewView, PrePrepare, PreparedCert, Reply,
    Reproposal, SignedMessage, StateQuery, StateReport, Transfer, ViewChange, Vote,
};
pub use replica::{
    LogEntry, Outbound, Output, Replica, ReplicaEvent, Role, Status, TimerArm, TimerId,
    VcCause,
};
pub use types::{
    Command, ConfigDelta, ConsensusConfig, Decision, Digest, Phase, Request, Seq, View,
};

use crate::sim::ReplicaId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsensusError {
    #[error("invalid consensus configuration: {0}")]
    InvalidConfig(String),
    #[error("membership would drop below 3f+1 ({have} < {need})")]
    MembershipViolation { have: usize, need: usize },
}

/// Votes needed for a prepare or commit quorum. Only `n = 3f + 1` is accepted.
pub fn quorum_threshold(n: usize, f: usize) -> Result<usize, ConsensusError> {
    if f == 0 || n != 3 * f + 1 {
        return Err(ConsensusError::InvalidConfig(format!(
            "n={n}, f={f}: expected n = 3f+1 with f >= 1"
        )));
    }
    Ok(2 * f + 1)
}

/// Leader of `view`: members rotate in membership order.
pub fn leader_of(view: View, membership: &[ReplicaId]) -> ReplicaId {
    assert!(!membership.is_empty(), "empty membership");
    membership[(view % membership.len() as u64) as usize]
}

/// Check a proposed membership keeps `3f+1` voting replicas.
pub fn check_membership(members: &[ReplicaId], f: usize) -> Result<(), ConsensusError> {
    let need = 3 * f + 1;
    let mut uniq = members.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.len() < need {
        return Err(ConsensusError::MembershipViolation {
            have: uniq.len(),
            need,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_examples() {
        assert_eq!(quorum_threshold(4, 1), Ok(3));
        assert_eq!(quorum_threshold(7, 2), Ok(5));
        assert!(matches!(
            quorum_threshold(5, 1),
            Err(ConsensusError::InvalidConfig(_))
        ));
        assert!(quorum_threshold(1, 0).is_err());
    }

    #[test]
    fn leader_rotation() {
        let m: Vec<ReplicaId> = (0..4).map(ReplicaId).collect();
        assert_eq!(leader_of(5, &m), ReplicaId(1));
        assert_eq!(leader_of(0, &m), ReplicaId(0));
    }

    #[test]
    fn membership_floor() {
        let m: Vec<ReplicaId> = (0..3).map(ReplicaId).collect();
        assert_eq!(
            check_membership(&m, 1),
            Err(ConsensusError::MembershipViolation { have: 3, need: 4 })
        );
    }

    /// Any two quorums of size 2f+1 out of 3f+1 share at least f+1 members,
    /// so at least one correct replica. Checked exhaustively by bitmask.
    #[test]
    fn quorum_intersection_exhaustive() {
        for f in 1..=3usize {
            let n = 3 * f + 1;
            let q = quorum_threshold(n, f).unwrap();
            let quorums: Vec<u32> = (0u32..(1 << n))
                .filter(|m| m.count_ones() as usize == q)
                .collect();
            let mut min_overlap = usize::MAX;
            for a in &quorums {
                for b in &quorums {
                    min_overlap = min_overlap.min((a & b).count_ones() as usize);
                }
            }
            assert_eq!(min_overlap, f + 1, "f={f}");
        }
    }
}
