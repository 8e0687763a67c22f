use std::collections::{BTreeMap, BTreeSet};

use super::message::{
    CheckpointCert, ConsensusMessage, PreparedCert, Reproposal, SignedMessage, ViewChange,
};
use super::types::{Request, Seq, View};
use super::leader_of;
use crate::net::Keyring;
use crate::sim::ReplicaId;

/// Membership and fault bound a certificate is checked against.
pub struct Quorum<'a> {
    pub keys: &'a Keyring,
    pub members: &'a [ReplicaId],
    pub f: usize,
}

impl Quorum<'_> {
    fn is_member(&self, r: ReplicaId) -> bool {
        self.members.contains(&r)
    }

    pub fn check_prepared(&self, cert: &PreparedCert) -> bool {
        if cert.request.digest() != cert.digest {
            return false;
        }
        let leader = leader_of(cert.view, self.members);
        let proposal_ok = match cert.proposal.open(self.keys) {
            Some(ConsensusMessage::PrePrepare(pp)) => {
                pp.sender == leader
                    && pp.view == cert.view
                    && pp.seq == cert.seq
                    && pp.digest == cert.digest
            }
            _ => false,
        };
        if !proposal_ok {
            return false;
        }
        let mut voters = BTreeSet::new();
        for p in &cert.prepares {
            match p.open(self.keys) {
                Some(ConsensusMessage::Prepare(v))
                    if v.view == cert.view
                        && v.seq == cert.seq
                        && v.digest == cert.digest
                        && v.sender != leader
                        && self.is_member(v.sender) =>
                {
                    voters.insert(v.sender);
                }
                _ => return false,
            }
        }
        voters.len() >= 2 * self.f
    }

    pub fn check_checkpoint(&self, cert: &CheckpointCert) -> bool {
        let mut voters = BTreeSet::new();
        for r in &cert.reports {
            match r.open(self.keys) {
                Some(ConsensusMessage::StateReport(s))
                    if s.transfer.is_none()
                        && s.checkpoint == cert.seq
                        && s.digest == cert.digest
                        && self.is_member(s.sender) =>
                {
                    voters.insert(s.sender);
                }
                _ => return false,
            }
        }
        voters.len() > 2 * self.f
    }

    pub fn check_view_change(&self, vc: &ViewChange) -> bool {
        if !self.is_member(vc.sender) {
            return false;
        }
        let stable = vc.stable.as_ref().map_or(0, |c| c.seq);
        if let Some(c) = &vc.stable {
            if !self.check_checkpoint(c) {
                return false;
            }
        }
        vc.prepared
            .iter()
            .all(|p| p.seq > stable && p.view < vc.new_view && self.check_prepared(p))
    }

    /// Open and check a set of signed view-changes for `view`; returns them
    /// keyed by sender, or `None` if any is invalid or duplicated.
    pub fn open_view_changes(
        &self,
        view: View,
        signed: &[SignedMessage],
    ) -> Option<BTreeMap<ReplicaId, ViewChange>> {
        let mut out = BTreeMap::new();
        for s in signed {
            match s.open(self.keys) {
                Some(ConsensusMessage::ViewChange(vc))
                    if vc.new_view == view && self.check_view_change(&vc) =>
                {
                    if out.insert(vc.sender, vc).is_some() {
                        return None;
                    }
                }
                _ => return None,
            }
        }
        Some(out)
    }
}

/// Work out what a new leader must re-propose from a view-change quorum:
/// every sequence number between the highest stable checkpoint and the
/// highest prepared certificate, filled with the highest-view prepared
/// request or a no-op.
pub fn reproposals<'a>(vcs: impl IntoIterator<Item = &'a ViewChange>) -> (Seq, Vec<Reproposal>) {
    let vcs: Vec<&ViewChange> = vcs.into_iter().collect();
    let min_s = vcs
        .iter()
        .filter_map(|v| v.stable.as_ref().map(|c| c.seq))
        .max()
        .unwrap_or(0);
    let mut best: BTreeMap<Seq, (View, &Request)> = BTreeMap::new();
    for vc in &vcs {
        for p in &vc.prepared {
            if p.seq <= min_s {
                continue;
            }
            let e = best.entry(p.seq).or_insert((p.view, &p.request));
            if p.view > e.0 {
                *e = (p.view, &p.request);
            }
        }
    }
    let max_s = best.keys().next_back().copied().unwrap_or(min_s);
    let props = (min_s + 1..=max_s)
        .map(|seq| Reproposal {
            seq,
            request: best
                .get(&seq)
                .map(|(_, r)| (*r).clone())
                .unwrap_or_else(Request::noop),
        })
        .collect();
    (min_s, props)
}
