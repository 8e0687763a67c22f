use serde::{Deserialize, Serialize};

use super::types::{Command, Digest, Request, Seq, View};
use crate::net::{AuthTag, Keyring};
use crate::sim::{ComponentId, ReplicaId};

/// An encoded message with its sender's authenticator. Certificates carry
/// these so third parties can re-verify votes they did not receive directly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedMessage {
    pub sender: ComponentId,
    pub body: Vec<u8>,
    pub tag: AuthTag,
}

impl SignedMessage {
    pub fn sign(keys: &Keyring, sender: ComponentId, msg: &ConsensusMessage) -> SignedMessage {
        let body = msg.encode();
        let tag = keys.sign(sender, &body);
        SignedMessage { sender, body, tag }
    }

    /// Verify the tag, decode, and check the embedded sender matches.
    pub fn open(&self, keys: &Keyring) -> Option<ConsensusMessage> {
        if !keys.verify(self.sender, &self.body, &self.tag) {
            return None;
        }
        let msg = ConsensusMessage::decode(&self.body)?;
        (msg.sender() == self.sender).then_some(msg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrePrepare {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
    pub request: Request,
    pub sender: ReplicaId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
    pub sender: ReplicaId,
}

/// Evidence that `(view, seq, digest)` prepared: the leader's signed
/// pre-prepare plus `2f` prepares.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedCert {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
    pub request: Request,
    pub proposal: SignedMessage,
    pub prepares: Vec<SignedMessage>,
}

/// `2f+1` matching checkpoint reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointCert {
    pub seq: Seq,
    pub digest: Digest,
    pub reports: Vec<SignedMessage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewChange {
    pub new_view: View,
    pub sender: ReplicaId,
    pub stable: Option<CheckpointCert>,
    pub prepared: Vec<PreparedCert>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reproposal {
    pub seq: Seq,
    pub request: Request,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewView {
    pub view: View,
    pub sender: ReplicaId,
    pub view_changes: Vec<SignedMessage>,
    pub reproposals: Vec<Reproposal>,
    /// One signed pre-prepare per re-proposal, so later certificates need
    /// not embed this whole message.
    pub pre_prepares: Vec<SignedMessage>,
}

/// A contiguous slice of the decided log, shipped for state transfer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub from: Seq,
    pub upto: Seq,
    pub entries: Vec<(Seq, Request)>,
}

impl Transfer {
    pub fn digest(&self) -> Digest {
        Digest::of(&bincode::serialize(self).expect("transfer encodes"))
    }
}

/// Digest of the decided log at a checkpoint, optionally answering a range query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateReport {
    pub sender: ReplicaId,
    pub view: View,
    pub checkpoint: Seq,
    pub digest: Digest,
    pub transfer: Option<Transfer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateQuery {
    pub sender: ReplicaId,
    pub from: Seq,
    pub upto: Seq,
}

/// Execution result returned to the client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub sender: ReplicaId,
    pub view: View,
    pub seq: Seq,
    pub req_id: u64,
    pub digest: Digest,
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Request,
    PrePrepare,
    Prepare,
    Commit,
    ViewChange,
    NewView,
    StateReport,
    StateQuery,
    Reply,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::Request,
        MessageKind::PrePrepare,
        MessageKind::Prepare,
        MessageKind::Commit,
        MessageKind::ViewChange,
        MessageKind::NewView,
        MessageKind::StateReport,
        MessageKind::StateQuery,
        MessageKind::Reply,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsensusMessage {
    Request(Request),
    PrePrepare(PrePrepare),
    Prepare(Vote),
    Commit(Vote),
    ViewChange(ViewChange),
    NewView(NewView),
    StateReport(StateReport),
    StateQuery(StateQuery),
    Reply(Reply),
}

impl ConsensusMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ConsensusMessage::Request(_) => MessageKind::Request,
            ConsensusMessage::PrePrepare(_) => MessageKind::PrePrepare,
            ConsensusMessage::Prepare(_) => MessageKind::Prepare,
            ConsensusMessage::Commit(_) => MessageKind::Commit,
            ConsensusMessage::ViewChange(_) => MessageKind::ViewChange,
            ConsensusMessage::NewView(_) => MessageKind::NewView,
            ConsensusMessage::StateReport(_) => MessageKind::StateReport,
            ConsensusMessage::StateQuery(_) => MessageKind::StateQuery,
            ConsensusMessage::Reply(_) => MessageKind::Reply,
        }
    }

    pub fn sender(&self) -> ComponentId {
        match self {
            ConsensusMessage::Request(r) => r.client,
            ConsensusMessage::PrePrepare(m) => m.sender.into(),
            ConsensusMessage::Prepare(v) | ConsensusMessage::Commit(v) => v.sender.into(),
            ConsensusMessage::ViewChange(m) => m.sender.into(),
            ConsensusMessage::NewView(m) => m.sender.into(),
            ConsensusMessage::StateReport(m) => m.sender.into(),
            ConsensusMessage::StateQuery(m) => m.sender.into(),
            ConsensusMessage::Reply(m) => m.sender.into(),
        }
    }

    /// Protocol view the message belongs to, where it has one.
    pub fn view(&self) -> Option<View> {
        match self {
            ConsensusMessage::PrePrepare(m) => Some(m.view),
            ConsensusMessage::Prepare(v) | ConsensusMessage::Commit(v) => Some(v.view),
            ConsensusMessage::ViewChange(m) => Some(m.new_view),
            ConsensusMessage::NewView(m) => Some(m.view),
            ConsensusMessage::StateReport(m) => Some(m.view),
            ConsensusMessage::Reply(m) => Some(m.view),
            ConsensusMessage::Request(_) | ConsensusMessage::StateQuery(_) => None,
        }
    }

    pub fn seq(&self) -> Option<Seq> {
        match self {
            ConsensusMessage::PrePrepare(m) => Some(m.seq),
            ConsensusMessage::Prepare(v) | ConsensusMessage::Commit(v) => Some(v.seq),
            ConsensusMessage::StateReport(m) => Some(m.checkpoint),
            ConsensusMessage::Reply(m) => Some(m.seq),
            _ => None,
        }
    }

    pub fn digest(&self) -> Option<Digest> {
        match self {
            ConsensusMessage::PrePrepare(m) => Some(m.digest),
            ConsensusMessage::Prepare(v) | ConsensusMessage::Commit(v) => Some(v.digest),
            ConsensusMessage::StateReport(m) => Some(m.digest),
            ConsensusMessage::Reply(m) => Some(m.digest),
            ConsensusMessage::Request(r) => Some(r.digest()),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        bincode::serialize(self).expect("consensus message encodes")
    }

    pub fn decode(bytes: &[u8]) -> Option<ConsensusMessage> {
        bincode::deserialize(bytes).ok()
    }
}
