use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::cert::{reproposals, Quorum};
use super::message::{
    CheckpointCert, ConsensusMessage, MessageKind, NewView, PrePrepare, PreparedCert, Reply,
    Reproposal, SignedMessage, StateQuery, StateReport, Transfer, ViewChange, Vote,
};
use super::types::{
    Command, ConfigDelta, ConsensusConfig, Decision, Digest, Phase, Request, Seq, View,
};
use super::leader_of;
use crate::net::Keyring;
use crate::sim::{ComponentId, ReplicaId, SimTime};

const MAX_BUFFERED: usize = 4096;
const MAX_BACKOFF_SHIFT: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Votes and arms timers.
    Member,
    /// Follows the log without voting, until promoted by a replace command.
    Learner,
    Retired,
    /// Provisioned spare, not yet activated.
    Dormant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Normal,
    ViewChanging { target: View },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimerId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Purpose {
    AwaitPrePrepare,
    AwaitPrepared { view: View, seq: Seq },
    AwaitCommitted { view: View, seq: Seq },
    AwaitNewView { view: View },
    /// Re-broadcast our view-change until a quorum forms. Not a suspicion.
    ResendViewChange { view: View },
}

#[derive(Clone, Debug)]
struct Timer {
    purpose: Purpose,
    armed_at: SimTime,
    deadline: SimTime,
}

/// Request to the driver to deliver [`Replica::on_timeout`] at `deadline`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerArm {
    pub id: TimerId,
    pub deadline: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub to: Vec<ComponentId>,
    pub msg: ConsensusMessage,
    pub signed: SignedMessage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcCause {
    Timeout,
    /// f+1 peers already asked for a higher view.
    Joined,
}

/// Replica-level occurrences worth recording on the audit plane.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReplicaEvent {
    DeadlineExpired {
        phase: Phase,
        view: View,
        seq: Option<Seq>,
        armed_at: SimTime,
        deadline: SimTime,
        suspected: ReplicaId,
    },
    ViewChangeStarted {
        from_view: View,
        to_view: View,
        cause: VcCause,
    },
    NewViewInstalled {
        view: View,
        leader: ReplicaId,
        reproposals: usize,
    },
    ViewSynced {
        view: View,
    },
    StableCheckpoint {
        seq: Seq,
        digest: Digest,
    },
    StateTransferred {
        entries: Vec<(Seq, Digest)>,
    },
    ConfigApplied {
        seq: Seq,
        delta: ConfigDelta,
        advisory: Option<u64>,
    },
    MembershipChanged {
        seq: Seq,
        members: Vec<ReplicaId>,
        learners: Vec<ReplicaId>,
    },
    Retired {
        seq: Seq,
    },
    Rejected {
        kind: MessageKind,
        from: ComponentId,
        reason: String,
    },
}

#[derive(Clone, Debug, Default)]
pub struct Output {
    pub outbound: Vec<Outbound>,
    pub decisions: Vec<Decision>,
    pub events: Vec<ReplicaEvent>,
    pub timers: Vec<TimerArm>,
}

impl Output {
    pub fn is_empty(&self) -> bool {
        self.outbound.is_empty()
            && self.decisions.is_empty()
            && self.events.is_empty()
            && self.timers.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub request: Request,
    pub digest: Digest,
    pub view: View,
    pub transferred: bool,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    proposal: Option<(Digest, Request, SignedMessage)>,
    prepares: BTreeMap<ReplicaId, (Digest, SignedMessage)>,
    commits: BTreeMap<ReplicaId, Digest>,
    anchor: SimTime,
    prepared: bool,
    committed: bool,
}

#[derive(Clone, Debug)]
struct Committed {
    request: Request,
    digest: Digest,
    view: View,
    quorum: Vec<ReplicaId>,
}

#[derive(Clone, Debug)]
struct Outstanding {
    upto: Seq,
    sent_at: SimTime,
}

/// One replica of the ordering cluster.
#[derive(Clone, Debug)]
pub struct Replica {
    id: ReplicaId,
    keys: Keyring,
    config: ConsensusConfig,
    membership: Vec<ReplicaId>,
    learners: BTreeSet<ReplicaId>,
    role: Role,
    view: View,
    status: Status,
    now: SimTime,

    next_seq: Seq,
    slots: BTreeMap<(View, Seq), Slot>,
    prepared_certs: BTreeMap<Seq, PreparedCert>,
    committed: BTreeMap<Seq, Committed>,
    decided: BTreeMap<Seq, LogEntry>,
    last_executed: Seq,
    log_digest: Digest,
    checkpoints: BTreeMap<Seq, Digest>,
    checkpoint_votes: BTreeMap<(Seq, Digest), BTreeMap<ReplicaId, SignedMessage>>,
    stable: Option<CheckpointCert>,

    pending: BTreeMap<u64, Request>,
    in_log: BTreeSet<u64>,
    /// Request id to the sequence number that first executed it.
    executed_reqs: BTreeMap<u64, Seq>,

    timers: BTreeMap<TimerId, Timer>,
    next_timer: u64,
    vc_store: BTreeMap<View, BTreeMap<ReplicaId, (SignedMessage, ViewChange)>>,
    new_view_sent: BTreeSet<View>,
    vc_attempts: u32,
    /// The new-view that installed the current view, re-sent to stragglers.
    installed_nv: Option<(View, SignedMessage)>,
    future: BTreeMap<View, Vec<SignedMessage>>,
    buffered: usize,
    seen_views: BTreeMap<ReplicaId, View>,

    outstanding: Option<Outstanding>,
    transfer_votes: BTreeMap<(Seq, Seq, Digest), (Transfer, BTreeSet<ReplicaId>)>,

    out: Output,
}

impl Replica {
    pub fn new(
        id: ReplicaId,
        config: ConsensusConfig,
        membership: Vec<ReplicaId>,
        keys: Keyring,
    ) -> Self {
        let role = if membership.contains(&id) {
            Role::Member
        } else {
            Role::Dormant
        };
        Replica {
            id,
            keys,
            config,
            membership,
            learners: BTreeSet::new(),
            role,
            view: 0,
            status: Status::Normal,
            now: SimTime::ZERO,
            next_seq: 1,
            slots: BTreeMap::new(),
            prepared_certs: BTreeMap::new(),
            committed: BTreeMap::new(),
            decided: BTreeMap::new(),
            last_executed: 0,
            log_digest: Digest::empty_log(),
            checkpoints: BTreeMap::new(),
            checkpoint_votes: BTreeMap::new(),
            stable: None,
            pending: BTreeMap::new(),
            in_log: BTreeSet::new(),
            executed_reqs: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_timer: 0,
            vc_store: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            vc_attempts: 0,
            installed_nv: None,
            future: BTreeMap::new(),
            buffered: 0,
            seen_views: BTreeMap::new(),
            outstanding: None,
            transfer_votes: BTreeMap::new(),
            out: Output::default(),
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }
    pub fn view(&self) -> View {
        self.view
    }
    pub fn status(&self) -> Status {
        self.status
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn membership(&self) -> &[ReplicaId] {
        &self.membership
    }
    pub fn learners(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.learners.iter().copied()
    }
    pub fn config(&self) -> &ConsensusConfig {
        &self.config
    }
    pub fn last_executed(&self) -> Seq {
        self.last_executed
    }
    pub fn log_digest(&self) -> Digest {
        self.log_digest
    }
    pub fn decided_log(&self) -> &BTreeMap<Seq, LogEntry> {
        &self.decided
    }
    pub fn stable_checkpoint(&self) -> Seq {
        self.stable.as_ref().map_or(0, |c| c.seq)
    }
    pub fn leader(&self) -> ReplicaId {
        leader_of(self.view, &self.membership)
    }
    pub fn is_leader(&self) -> bool {
        self.role == Role::Member && self.leader() == self.id
    }
    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }
    pub fn armed_timers(&self) -> usize {
        self.timers.len()
    }

    /// Answer a state query: the latest checkpoint, or a slice of the log.
    pub fn report_state(&self, range: Option<(Seq, Seq)>) -> StateReport {
        let checkpoint = self.checkpoints.keys().next_back().copied().unwrap_or(0);
        let mut report = StateReport {
            sender: self.id,
            view: self.view,
            checkpoint,
            digest: self.checkpoints.get(&checkpoint).copied().unwrap_or_else(Digest::empty_log),
            transfer: None,
        };
        if let Some((from, upto)) = range {
            let upto = upto.min(self.last_executed);
            let entries: Vec<(Seq, Request)> = (from.max(1)..=upto)
                .filter_map(|s| self.decided.get(&s).map(|e| (s, e.request.clone())))
                .collect();
            let t = Transfer { from, upto, entries };
            report.digest = t.digest();
            report.transfer = Some(t);
        }
        report
    }

    /// Out-of-band timeout change, used by what-if branches.
    pub fn set_timeout(&mut self, t: SimTime) {
        if t.0 > 0 {
            self.config.timeout = t;
        }
    }

    /// Activate a provisioned spare as a non-voting learner.
    pub fn activate_learner(&mut self, membership: Vec<ReplicaId>, learners: Vec<ReplicaId>) {
        if self.role == Role::Dormant {
            self.membership = membership;
            self.learners = learners.into_iter().collect();
            self.learners.insert(self.id);
            self.role = Role::Learner;
        }
    }

    /// Resume after a crash. Timer events delivered while down were lost.
    pub fn recover(&mut self, now: SimTime) -> Output {
        self.now = now;
        self.timers.clear();
        self.maybe_arm_preprepare(1);
        self.maybe_sync_view();
        std::mem::take(&mut self.out)
    }

    pub fn handle(&mut self, signed: &SignedMessage, now: SimTime) -> Output {
        self.now = self.now.max(now);
        if matches!(self.role, Role::Member | Role::Learner) {
            self.expire_due();
            self.dispatch(signed);
        }
        std::mem::take(&mut self.out)
    }

    pub fn on_timeout(&mut self, _id: TimerId, now: SimTime) -> Output {
        self.now = self.now.max(now);
        if self.role == Role::Member {
            self.expire_due();
        }
        std::mem::take(&mut self.out)
    }

    // ---- plumbing ----

    fn quorum(&self) -> usize {
        2 * self.config.f + 1
    }

    fn is_member(&self, r: ReplicaId) -> bool {
        self.membership.contains(&r)
    }

    fn voting(&self) -> bool {
        self.role == Role::Member
    }

    fn peers(&self) -> Vec<ComponentId> {
        let mut v: Vec<ReplicaId> = self
            .membership
            .iter()
            .chain(self.learners.iter())
            .copied()
            .filter(|r| *r != self.id)
            .collect();
        v.sort();
        v.dedup();
        v.into_iter().map(ComponentId::from).collect()
    }

    fn members_except_self(&self) -> Vec<ComponentId> {
        let mut v: Vec<ReplicaId> = self
            .membership
            .iter()
            .copied()
            .filter(|r| *r != self.id)
            .collect();
        v.sort();
        v.into_iter().map(ComponentId::from).collect()
    }

    fn send(&mut self, to: Vec<ComponentId>, msg: ConsensusMessage) -> SignedMessage {
        let signed = SignedMessage::sign(&self.keys, self.id.into(), &msg);
        if !to.is_empty() {
            self.out.outbound.push(Outbound {
                to,
                msg,
                signed: signed.clone(),
            });
        }
        signed
    }

    fn reject(&mut self, kind: MessageKind, from: ComponentId, reason: &str) {
        self.out.events.push(ReplicaEvent::Rejected {
            kind,
            from,
            reason: reason.to_string(),
        });
    }

    fn arm(&mut self, purpose: Purpose, deadline: SimTime) {
        let id = TimerId(self.next_timer);
        self.next_timer += 1;
        self.timers.insert(
            id,
            Timer {
                purpose,
                armed_at: self.now,
                deadline,
            },
        );
        self.out.timers.push(TimerArm { id, deadline });
    }

    fn cancel(&mut self, purpose: Purpose) {
        self.timers.retain(|_, t| t.purpose != purpose);
    }

    fn has_timer(&self, purpose: Purpose) -> bool {
        self.timers.values().any(|t| t.purpose == purpose)
    }

    fn expire_due(&mut self) {
        loop {
            let due = self
                .timers
                .iter()
                .filter(|(_, t)| t.deadline <= self.now)
                .min_by_key(|(id, t)| (t.deadline, **id))
                .map(|(id, _)| *id);
            match due {
                Some(id) => self.fire(id),
                None => break,
            }
        }
    }

    fn fire(&mut self, id: TimerId) {
        let Some(t) = self.timers.remove(&id) else {
            return;
        };
        let (phase, view, seq) = match t.purpose {
            Purpose::AwaitPrePrepare => (Phase::PrePrepare, self.view, None),
            Purpose::AwaitPrepared { view, seq } => (Phase::Prepare, view, Some(seq)),
            Purpose::AwaitCommitted { view, seq } => (Phase::Commit, view, Some(seq)),
            Purpose::AwaitNewView { view } => (Phase::NewView, view, None),
            Purpose::ResendViewChange { view } => {
                self.resend_view_change(view);
                return;
            }
        };
        self.out.events.push(ReplicaEvent::DeadlineExpired {
            phase,
            view,
            seq,
            armed_at: t.armed_at,
            deadline: t.deadline,
            suspected: leader_of(view, &self.membership),
        });
        match t.purpose {
            Purpose::AwaitNewView { view } => {
                if self.status == (Status::ViewChanging { target: view }) {
                    self.vc_attempts = self.vc_attempts.saturating_add(1);
                    self.start_view_change(view + 1, VcCause::Timeout);
                }
            }
            _ => {
                if self.status == Status::Normal {
                    self.start_view_change(self.view + 1, VcCause::Timeout);
                }
            }
        }
    }

    fn buffer_future(&mut self, view: View, signed: &SignedMessage) {
        if self.buffered < MAX_BUFFERED {
            self.future.entry(view).or_default().push(signed.clone());
            self.buffered += 1;
        }
    }

    fn note_view(&mut self, sender: ReplicaId, view: View) {
        if view > self.view && self.is_member(sender) {
            let e = self.seen_views.entry(sender).or_insert(view);
            *e = (*e).max(view);
            self.maybe_sync_view();
        }
    }

    /// Whether a normal-phase message for `view` should be processed now.
    /// Future-view messages are buffered.
    fn admit(&mut self, view: View, sender: ReplicaId, signed: &SignedMessage) -> bool {
        if view > self.view {
            self.buffer_future(view, signed);
            self.note_view(sender, view);
            return false;
        }
        view == self.view && self.status == Status::Normal
    }

    fn dispatch(&mut self, signed: &SignedMessage) {
        let Some(msg) = signed.open(&self.keys) else {
            self.reject(MessageKind::Request, signed.sender, "bad signature or encoding");
            return;
        };
        match msg {
            ConsensusMessage::Request(r) => self.on_request(r),
            ConsensusMessage::PrePrepare(pp) => self.on_pre_prepare(signed, pp),
            ConsensusMessage::Prepare(v) => self.on_prepare(signed, v),
            ConsensusMessage::Commit(v) => self.on_commit(signed, v),
            ConsensusMessage::ViewChange(vc) => self.on_view_change(signed, vc),
            ConsensusMessage::NewView(nv) => self.on_new_view(signed, nv),
            ConsensusMessage::StateReport(r) => self.on_state_report(signed, r),
            ConsensusMessage::StateQuery(q) => self.on_state_query(q),
            ConsensusMessage::Reply(_) => {}
        }
    }

    // ---- normal case ----

    fn on_request(&mut self, req: Request) {
        if req.client != ComponentId::Manager {
            self.reject(MessageKind::Request, req.client, "request from non-client");
            return;
        }
        if req.is_noop() {
            return;
        }
        if let Some(seq) = self.executed_reqs.get(&req.req_id).copied() {
            // Retransmission: the client missed our reply.
            self.send_reply(seq);
            return;
        }
        self.pending.entry(req.req_id).or_insert(req);
        if self.is_leader() {
            self.try_propose();
        } else {
            self.maybe_arm_preprepare(1);
        }
    }

    fn inflight(&self) -> usize {
        self.slots
            .range((self.view, 0)..=(self.view, Seq::MAX))
            .filter(|((_, s), slot)| {
                slot.proposal.is_some() && !slot.committed && *s > self.last_executed
            })
            .count()
    }

    fn next_unproposed(&self) -> Option<Request> {
        self.pending
            .iter()
            .find(|(id, _)| !self.in_log.contains(id) && !self.executed_reqs.contains_key(id))
            .map(|(_, r)| r.clone())
    }

    fn try_propose(&mut self) {
        if !self.is_leader() || self.status != Status::Normal {
            return;
        }
        self.next_seq = self
            .next_seq
            .max(self.last_executed + 1)
            .max(self.stable_checkpoint() + 1);
        while self.inflight() < self.config.pipeline_depth {
            let Some(request) = self.next_unproposed() else {
                break;
            };
            let seq = self.next_seq;
            self.next_seq += 1;
            let digest = request.digest();
            let pp = PrePrepare {
                view: self.view,
                seq,
                digest,
                request: request.clone(),
                sender: self.id,
            };
            let signed = self.send(self.peers(), ConsensusMessage::PrePrepare(pp));
            self.in_log.insert(request.req_id);
            let slot = self.slots.entry((self.view, seq)).or_default();
            slot.proposal = Some((digest, request, signed));
            slot.anchor = self.now;
            self.check_prepared(self.view, seq);
        }
    }

    /// Backups watch for the leader to propose outstanding requests.
    /// `budget` multiplies the base timeout.
    fn maybe_arm_preprepare(&mut self, budget: u64) {
        if !self.voting()
            || self.status != Status::Normal
            || self.is_leader()
            || self.has_timer(Purpose::AwaitPrePrepare)
            || self.next_unproposed().is_none()
            || self.inflight() > 0
        {
            return;
        }
        let deadline = self.now + self.config.timeout.mul(budget);
        self.arm(Purpose::AwaitPrePrepare, deadline);
    }

    fn on_pre_prepare(&mut self, signed: &SignedMessage, pp: PrePrepare) {
        if !self.admit(pp.view, pp.sender, signed) {
            return;
        }
        let leader = self.leader();
        if pp.sender != leader {
            self.reject(MessageKind::PrePrepare, pp.sender.into(), "pre-prepare from non-leader");
            return;
        }
        if pp.request.digest() != pp.digest {
            self.reject(MessageKind::PrePrepare, pp.sender.into(), "digest mismatch");
            return;
        }
        if pp.seq <= self.stable_checkpoint() {
            return;
        }
        let slot = self.slots.entry((pp.view, pp.seq)).or_default();
        if let Some((d, _, _)) = &slot.proposal {
            if *d != pp.digest {
                self.reject(MessageKind::PrePrepare, pp.sender.into(), "conflicting pre-prepare");
            }
            return;
        }
        slot.proposal = Some((pp.digest, pp.request.clone(), signed.clone()));
        slot.anchor = self.now;
        if !pp.request.is_noop() {
            self.in_log.insert(pp.request.req_id);
            if !self.executed_reqs.contains_key(&pp.request.req_id) {
                self.pending
                    .entry(pp.request.req_id)
                    .or_insert_with(|| pp.request.clone());
            }
        }
        if self.voting() {
            self.cast_prepare(pp.view, pp.seq, pp.digest);
            self.cancel(Purpose::AwaitPrePrepare);
            if pp.seq > self.last_executed {
                let deadline = self.now + self.config.timeout;
                self.arm(Purpose::AwaitPrepared { view: pp.view, seq: pp.seq }, deadline);
            }
        }
        self.check_prepared(pp.view, pp.seq);
    }

    fn cast_prepare(&mut self, view: View, seq: Seq, digest: Digest) {
        let vote = Vote {
            view,
            seq,
            digest,
            sender: self.id,
        };
        let signed = self.send(self.peers(), ConsensusMessage::Prepare(vote));
        self.slots
            .entry((view, seq))
            .or_default()
            .prepares
            .insert(self.id, (digest, signed));
    }

    fn on_prepare(&mut self, signed: &SignedMessage, v: Vote) {
        if !self.admit(v.view, v.sender, signed) {
            return;
        }
        if !self.is_member(v.sender) || v.sender == self.leader() {
            return;
        }
        if v.seq <= self.stable_checkpoint() {
            return;
        }
        self.slots
            .entry((v.view, v.seq))
            .or_default()
            .prepares
            .entry(v.sender)
            .or_insert_with(|| (v.digest, signed.clone()));
        self.check_prepared(v.view, v.seq);
    }

    fn check_prepared(&mut self, view: View, seq: Seq) {
        let leader = leader_of(view, &self.membership);
        let need = 2 * self.config.f;
        let Some(slot) = self.slots.get(&(view, seq)) else {
            return;
        };
        if slot.prepared {
            return;
        }
        let Some((digest, request, proposal)) = slot.proposal.clone() else {
            return;
        };
        let matching: Vec<SignedMessage> = slot
            .prepares
            .iter()
            .filter(|(r, (d, _))| *d == digest && **r != leader && self.is_member(**r))
            .map(|(_, (_, s))| s.clone())
            .collect();
        if matching.len() < need {
            return;
        }
        let anchor = slot.anchor;
        self.slots.get_mut(&(view, seq)).expect("slot").prepared = true;
        let cert = PreparedCert {
            view,
            seq,
            digest,
            request,
            proposal,
            prepares: matching,
        };
        let replace = self
            .prepared_certs
            .get(&seq)
            .is_none_or(|c| c.view <= view);
        if replace {
            self.prepared_certs.insert(seq, cert);
        }
        if self.voting() {
            let vote = Vote {
                view,
                seq,
                digest,
                sender: self.id,
            };
            self.send(self.peers(), ConsensusMessage::Commit(vote));
            self.slots
                .get_mut(&(view, seq))
                .expect("slot")
                .commits
                .insert(self.id, digest);
            let had = self.has_timer(Purpose::AwaitPrepared { view, seq });
            self.cancel(Purpose::AwaitPrepared { view, seq });
            if had && seq > self.last_executed {
                let deadline = anchor + self.config.timeout.mul(2);
                self.arm(Purpose::AwaitCommitted { view, seq }, deadline);
            }
        }
        self.check_committed(view, seq);
    }

    fn on_commit(&mut self, signed: &SignedMessage, v: Vote) {
        if !self.admit(v.view, v.sender, signed) {
            return;
        }
        if !self.is_member(v.sender) || v.seq <= self.stable_checkpoint() {
            return;
        }
        let slot = self.slots.entry((v.view, v.seq)).or_default();
        slot.commits.entry(v.sender).or_insert(v.digest);
        let certified = slot.commits.values().filter(|d| **d == v.digest).count();
        let ours = slot.proposal.as_ref().map(|(d, _, _)| *d);
        if certified >= self.quorum() && ours != Some(v.digest) && v.seq > self.last_executed {
            // The cluster committed something we never saw proposed.
            self.request_transfer(self.last_executed + 1, v.seq);
        }
        self.check_committed(v.view, v.seq);
    }

    fn check_committed(&mut self, view: View, seq: Seq) {
        let Some(slot) = self.slots.get_mut(&(view, seq)) else {
            return;
        };
        if !slot.prepared || slot.committed {
            return;
        }
        let Some((digest, request, _)) = slot.proposal.clone() else {
            return;
        };
        let quorum: Vec<ReplicaId> = slot
            .commits
            .iter()
            .filter(|(r, d)| **d == digest && self.membership.contains(r))
            .map(|(r, _)| *r)
            .collect();
        if quorum.len() < 2 * self.config.f + 1 {
            return;
        }
        slot.committed = true;
        self.cancel(Purpose::AwaitCommitted { view, seq });
        if seq > self.last_executed {
            self.committed.insert(
                seq,
                Committed {
                    request,
                    digest,
                    view,
                    quorum,
                },
            );
        }
        self.execute_ready();
        if seq > self.last_executed + self.config.pipeline_depth as u64 {
            self.request_transfer(self.last_executed + 1, seq - 1);
        }
        self.after_progress();
    }

    fn after_progress(&mut self) {
        if self.status != Status::Normal {
            return;
        }
        if self.is_leader() {
            self.try_propose();
        } else {
            self.maybe_arm_preprepare(2);
        }
    }

    // ---- execution ----

    fn execute_ready(&mut self) {
        while let Some(c) = self.committed.remove(&(self.last_executed + 1)) {
            let seq = self.last_executed + 1;
            self.execute(seq, c.request, c.digest, c.view, Some(c.quorum));
        }
        let le = self.last_executed;
        self.committed.retain(|s, _| *s > le);
        self.timers.retain(|_, t| match t.purpose {
            Purpose::AwaitPrepared { seq, .. } | Purpose::AwaitCommitted { seq, .. } => seq > le,
            _ => true,
        });
    }

    fn execute(
        &mut self,
        seq: Seq,
        request: Request,
        digest: Digest,
        view: View,
        quorum: Option<Vec<ReplicaId>>,
    ) {
        debug_assert_eq!(seq, self.last_executed + 1);
        self.last_executed = seq;
        self.log_digest = self.log_digest.chain(seq, &digest);
        let transferred = quorum.is_none();
        self.decided.insert(
            seq,
            LogEntry {
                request: request.clone(),
                digest,
                view,
                transferred,
            },
        );
        let fresh = !request.is_noop() && !self.executed_reqs.contains_key(&request.req_id);
        if fresh {
            self.executed_reqs.insert(request.req_id, seq);
        }
        self.pending.remove(&request.req_id);
        self.in_log.remove(&request.req_id);
        if let Some(quorum) = quorum {
            self.out.decisions.push(Decision {
                replica: self.id,
                seq,
                request: request.clone(),
                digest,
                view,
                quorum,
                decided_at: self.now,
            });
        }
        if fresh {
            self.send_reply(seq);
            self.apply(seq, &request.command);
        }
        if seq.is_multiple_of(self.config.checkpoint_interval) {
            self.checkpoint(seq);
        }
    }

    fn send_reply(&mut self, seq: Seq) {
        if !self.voting() {
            return;
        }
        let Some(e) = self.decided.get(&seq) else {
            return;
        };
        if e.request.is_noop() {
            return;
        }
        let reply = Reply {
            sender: self.id,
            view: self.view,
            seq,
            req_id: e.request.req_id,
            digest: e.digest,
            command: e.request.command.clone(),
        };
        let to = vec![e.request.client];
        self.send(to, ConsensusMessage::Reply(reply));
    }

    fn apply(&mut self, seq: Seq, command: &Command) {
        match command {
            Command::Noop | Command::Setpoint { .. } => {}
            Command::Configure { delta, advisory } => {
                if let Some(t) = delta.timeout {
                    if t.0 > 0 {
                        self.config.timeout = t;
                    }
                }
                self.out.events.push(ReplicaEvent::ConfigApplied {
                    seq,
                    delta: delta.clone(),
                    advisory: *advisory,
                });
            }
            Command::Join { replica } => {
                if !self.is_member(*replica) && self.learners.insert(*replica) {
                    self.push_membership(seq);
                }
            }
            Command::Replace { old, new, .. } => {
                let Some(pos) = self.membership.iter().position(|r| r == old) else {
                    return;
                };
                if self.is_member(*new) {
                    return;
                }
                self.membership[pos] = *new;
                self.learners.remove(new);
                self.push_membership(seq);
                if self.id == *old {
                    self.role = Role::Retired;
                    self.timers.clear();
                    self.out.events.push(ReplicaEvent::Retired { seq });
                } else if self.id == *new {
                    self.role = Role::Member;
                }
            }
        }
    }

    fn push_membership(&mut self, seq: Seq) {
        self.out.events.push(ReplicaEvent::MembershipChanged {
            seq,
            members: self.membership.clone(),
            learners: self.learners.iter().copied().collect(),
        });
    }

    // ---- checkpoints and state transfer ----

    fn checkpoint(&mut self, seq: Seq) {
        self.checkpoints.insert(seq, self.log_digest);
        let report = StateReport {
            sender: self.id,
            view: self.view,
            checkpoint: seq,
            digest: self.log_digest,
            transfer: None,
        };
        match self.role {
            Role::Member => {
                let mut to = self.peers();
                to.push(ComponentId::Manager);
                let signed = self.send(to, ConsensusMessage::StateReport(report));
                self.checkpoint_votes
                    .entry((seq, self.log_digest))
                    .or_default()
                    .insert(self.id, signed);
                self.check_stable(seq, self.log_digest);
            }
            Role::Learner => {
                self.send(vec![ComponentId::Manager], ConsensusMessage::StateReport(report));
            }
            _ => {}
        }
    }

    fn on_state_report(&mut self, signed: &SignedMessage, r: StateReport) {
        if !self.is_member(r.sender) {
            return;
        }
        if let Some(t) = r.transfer {
            self.on_transfer(r.sender, r.digest, t);
            return;
        }
        if r.checkpoint <= self.stable_checkpoint() {
            return;
        }
        let votes = self.checkpoint_votes.entry((r.checkpoint, r.digest)).or_default();
        votes.entry(r.sender).or_insert_with(|| signed.clone());
        let count = votes.len();
        self.check_stable(r.checkpoint, r.digest);
        if count > self.config.f && r.checkpoint > self.last_executed {
            self.request_transfer(self.last_executed + 1, r.checkpoint);
        }
    }

    fn check_stable(&mut self, seq: Seq, digest: Digest) {
        if seq <= self.stable_checkpoint() {
            return;
        }
        let Some(votes) = self.checkpoint_votes.get(&(seq, digest)) else {
            return;
        };
        if votes.len() < self.quorum() {
            return;
        }
        let cert = CheckpointCert {
            seq,
            digest,
            reports: votes.values().cloned().collect(),
        };
        self.stable = Some(cert);
        self.slots.retain(|(_, s), _| *s > seq);
        self.prepared_certs.retain(|s, _| *s > seq);
        self.checkpoint_votes.retain(|(s, _), _| *s > seq);
        self.out
            .events
            .push(ReplicaEvent::StableCheckpoint { seq, digest });
    }

    fn request_transfer(&mut self, from: Seq, upto: Seq) {
        if upto < from || self.role == Role::Retired {
            return;
        }
        if let Some(o) = &self.outstanding {
            if o.upto >= upto && self.now < o.sent_at + self.config.timeout {
                return;
            }
        }
        self.outstanding = Some(Outstanding {
            upto,
            sent_at: self.now,
        });
        let q = StateQuery {
            sender: self.id,
            from,
            upto,
        };
        self.send(self.members_except_self(), ConsensusMessage::StateQuery(q));
    }

    fn on_state_query(&mut self, q: StateQuery) {
        if !self.voting() || q.from > self.last_executed || q.from == 0 {
            return;
        }
        let report = self.report_state(Some((q.from, q.upto)));
        self.send(vec![q.sender.into()], ConsensusMessage::StateReport(report));
    }

    fn on_transfer(&mut self, sender: ReplicaId, digest: Digest, t: Transfer) {
        if self.outstanding.is_none() || t.digest() != digest || t.upto <= self.last_executed {
            return;
        }
        let contiguous = t.entries.len() as u64 == t.upto + 1 - t.from.max(1)
            && t.entries
                .iter()
                .zip(t.from.max(1)..)
                .all(|((s, _), want)| *s == want);
        if !contiguous {
            self.reject(MessageKind::StateReport, sender.into(), "malformed transfer");
            return;
        }
        let key = (t.from, t.upto, digest);
        let entry = self
            .transfer_votes
            .entry(key)
            .or_insert_with(|| (t, BTreeSet::new()));
        entry.1.insert(sender);
        if entry.1.len() <= self.config.f {
            return;
        }
        let (t, _) = self.transfer_votes.remove(&key).expect("entry");
        let mut applied = Vec::new();
        for (seq, request) in t.entries {
            if seq == self.last_executed + 1 {
                let d = request.digest();
                self.execute(seq, request, d, self.view, None);
                applied.push((seq, d));
            }
        }
        let le = self.last_executed;
        self.transfer_votes.retain(|(_, upto, _), _| *upto > le);
        if self.outstanding.as_ref().is_some_and(|o| o.upto <= le) {
            self.outstanding = None;
        }
        if !applied.is_empty() {
            self.out
                .events
                .push(ReplicaEvent::StateTransferred { entries: applied });
        }
        self.execute_ready();
        self.after_progress();
    }

    // ---- view change ----

    fn current_target(&self) -> View {
        match self.status {
            Status::Normal => self.view,
            Status::ViewChanging { target } => target,
        }
    }

    fn start_view_change(&mut self, target: View, cause: VcCause) {
        if !self.voting() || target <= self.current_target() {
            return;
        }
        let from_view = self.view;
        self.status = Status::ViewChanging { target };
        self.timers.clear();
        let stable_seq = self.stable_checkpoint();
        let vc = ViewChange {
            new_view: target,
            sender: self.id,
            stable: self.stable.clone(),
            prepared: self
                .prepared_certs
                .values()
                .filter(|c| c.seq > stable_seq)
                .cloned()
                .collect(),
        };
        let signed = self.send(
            self.members_except_self(),
            ConsensusMessage::ViewChange(vc.clone()),
        );
        self.vc_store
            .entry(target)
            .or_default()
            .insert(self.id, (signed, vc));
        self.out.events.push(ReplicaEvent::ViewChangeStarted {
            from_view,
            to_view: target,
            cause,
        });
        self.process_vc_quorum(target);
    }

    fn on_view_change(&mut self, signed: &SignedMessage, vc: ViewChange) {
        if vc.new_view <= self.view {
            // The sender missed the new-view for a view we already run.
            if let Some((v, nv)) = &self.installed_nv {
                if *v == self.view && self.status == Status::Normal && self.is_member(vc.sender) {
                    let (to, nv) = (vec![vc.sender.into()], nv.clone());
                    if let Some(msg) = nv.open(&self.keys) {
                        self.out.outbound.push(Outbound { to, msg, signed: nv });
                    }
                }
            }
            return;
        }
        let valid = Quorum {
            keys: &self.keys,
            members: &self.membership,
            f: self.config.f,
        }
        .check_view_change(&vc);
        if !valid {
            self.reject(MessageKind::ViewChange, vc.sender.into(), "invalid view-change");
            return;
        }
        let v = vc.new_view;
        let sender = vc.sender;
        self.vc_store
            .entry(v)
            .or_default()
            .entry(sender)
            .or_insert_with(|| (signed.clone(), vc));
        if v < self.current_target() {
            // The sender may still need our vote for the view we moved past.
            let own = self.vc_store[&v].get(&self.id).cloned();
            if let Some((s, vc)) = own {
                self.out.outbound.push(Outbound {
                    to: vec![sender.into()],
                    msg: ConsensusMessage::ViewChange(vc),
                    signed: s,
                });
            }
        }

        // Join once f+1 others want a view beyond ours.
        let current = self.current_target();
        let mut lowest: BTreeMap<ReplicaId, View> = BTreeMap::new();
        for (view, senders) in self.vc_store.range(current + 1..) {
            for r in senders.keys().filter(|r| **r != self.id) {
                lowest.entry(*r).or_insert(*view);
            }
        }
        if lowest.len() > self.config.f {
            let target = *lowest.values().min().expect("nonempty");
            self.start_view_change(target, VcCause::Joined);
        }
        self.process_vc_quorum(v);
    }

    fn process_vc_quorum(&mut self, v: View) {
        if self.status != (Status::ViewChanging { target: v }) {
            return;
        }
        let count = self.vc_store.get(&v).map_or(0, |m| m.len());
        if count < self.quorum() {
            if !self.has_timer(Purpose::ResendViewChange { view: v }) {
                let deadline = self.now + self.config.timeout;
                self.arm(Purpose::ResendViewChange { view: v }, deadline);
            }
            return;
        }
        self.cancel(Purpose::ResendViewChange { view: v });
        if leader_of(v, &self.membership) == self.id {
            if self.new_view_sent.insert(v) {
                self.send_new_view(v);
            }
        } else if !self.has_timer(Purpose::AwaitNewView { view: v }) {
            let budget = 1u64 << self.vc_attempts.min(MAX_BACKOFF_SHIFT);
            let deadline = self.now + self.config.timeout.mul(budget);
            self.arm(Purpose::AwaitNewView { view: v }, deadline);
        }
    }

    fn resend_view_change(&mut self, v: View) {
        if self.status != (Status::ViewChanging { target: v }) {
            return;
        }
        let own = self
            .vc_store
            .get(&v)
            .and_then(|m| m.get(&self.id))
            .map(|(s, vc)| (s.clone(), vc.clone()));
        if let Some((signed, vc)) = own {
            self.out.outbound.push(Outbound {
                to: self.members_except_self(),
                msg: ConsensusMessage::ViewChange(vc),
                signed,
            });
        }
        self.process_vc_quorum(v);
    }

    fn send_new_view(&mut self, v: View) {
        let chosen: Vec<(SignedMessage, ViewChange)> = self.vc_store[&v]
            .values()
            .take(self.quorum())
            .cloned()
            .collect();
        let (min_s, props) = reproposals(chosen.iter().map(|(_, vc)| vc));
        let pre_prepares: Vec<SignedMessage> = props
            .iter()
            .map(|p| {
                let pp = PrePrepare {
                    view: v,
                    seq: p.seq,
                    digest: p.request.digest(),
                    request: p.request.clone(),
                    sender: self.id,
                };
                SignedMessage::sign(&self.keys, self.id.into(), &ConsensusMessage::PrePrepare(pp))
            })
            .collect();
        let nv = NewView {
            view: v,
            sender: self.id,
            view_changes: chosen.into_iter().map(|(s, _)| s).collect(),
            reproposals: props.clone(),
            pre_prepares: pre_prepares.clone(),
        };
        let signed = self.send(self.peers(), ConsensusMessage::NewView(nv));
        self.installed_nv = Some((v, signed));
        self.install_view(v, min_s, props.into_iter().zip(pre_prepares).collect());
    }

    fn on_new_view(&mut self, signed: &SignedMessage, nv: NewView) {
        if nv.view <= self.view {
            return;
        }
        if nv.sender != leader_of(nv.view, &self.membership) {
            self.reject(MessageKind::NewView, nv.sender.into(), "new-view from non-leader");
            return;
        }
        let q = Quorum {
            keys: &self.keys,
            members: &self.membership,
            f: self.config.f,
        };
        let Some(vcs) = q.open_view_changes(nv.view, &nv.view_changes) else {
            self.reject(MessageKind::NewView, nv.sender.into(), "invalid view-change set");
            return;
        };
        if vcs.len() < self.quorum() {
            self.reject(MessageKind::NewView, nv.sender.into(), "view-change set below quorum");
            return;
        }
        let (min_s, props) = reproposals(vcs.values());
        let pps_match = nv.pre_prepares.len() == props.len()
            && nv.pre_prepares.iter().zip(&props).all(|(s, p)| {
                matches!(s.open(&self.keys), Some(ConsensusMessage::PrePrepare(pp))
                    if pp.view == nv.view
                        && pp.seq == p.seq
                        && pp.request == p.request
                        && pp.digest == p.request.digest())
            });
        if props != nv.reproposals || !pps_match {
            self.reject(MessageKind::NewView, nv.sender.into(), "re-proposals do not match");
            return;
        }
        self.installed_nv = Some((nv.view, signed.clone()));
        self.install_view(nv.view, min_s, props.into_iter().zip(nv.pre_prepares).collect());
    }

    fn install_view(
        &mut self,
        v: View,
        min_s: Seq,
        props: Vec<(Reproposal, SignedMessage)>,
    ) {
        self.view = v;
        self.status = Status::Normal;
        self.vc_attempts = 0;
        self.timers.clear();
        self.vc_store.retain(|k, _| *k > v);
        self.new_view_sent.retain(|k| *k > v);
        self.seen_views.retain(|_, sv| *sv > v);
        self.in_log.clear();
        let leader = leader_of(v, &self.membership);
        let max_s = props.last().map_or(min_s, |(p, _)| p.seq);
        self.next_seq = max_s.max(self.last_executed).max(min_s) + 1;
        let n_props = props.len();
        for (p, proposal) in props {
            let digest = p.request.digest();
            if !p.request.is_noop() {
                self.in_log.insert(p.request.req_id);
            }
            let slot = self.slots.entry((v, p.seq)).or_default();
            slot.proposal = Some((digest, p.request, proposal));
            slot.anchor = self.now;
            if self.voting() && self.id != leader {
                self.cast_prepare(v, p.seq, digest);
                if p.seq > self.last_executed {
                    let deadline = self.now + self.config.timeout;
                    self.arm(Purpose::AwaitPrepared { view: v, seq: p.seq }, deadline);
                }
            }
            self.check_prepared(v, p.seq);
        }
        self.out.events.push(ReplicaEvent::NewViewInstalled {
            view: v,
            leader,
            reproposals: n_props,
        });
        if min_s > self.last_executed {
            self.request_transfer(self.last_executed + 1, min_s);
        }
        self.drain_future();
        self.after_progress();
    }

    fn drain_future(&mut self) {
        let v = self.view;
        let stale: Vec<View> = self.future.range(..=v).map(|(k, _)| *k).collect();
        let mut ready = Vec::new();
        for k in stale {
            let msgs = self.future.remove(&k).expect("present");
            self.buffered -= msgs.len();
            if k == v {
                ready = msgs;
            }
        }
        for m in ready {
            if self.view != v || self.status != Status::Normal {
                break;
            }
            self.dispatch(&m);
        }
    }

    /// Adopt a higher view that f+1 members are already operating in.
    fn maybe_sync_view(&mut self) {
        let mut views: Vec<View> = self
            .seen_views
            .values()
            .copied()
            .filter(|v| *v > self.view)
            .collect();
        if views.len() <= self.config.f {
            return;
        }
        views.sort_unstable_by(|a, b| b.cmp(a));
        let v = views[self.config.f];
        if let Status::ViewChanging { target } = self.status {
            if v < target {
                return;
            }
        }
        self.view = v;
        self.status = Status::Normal;
        self.vc_attempts = 0;
        self.timers.clear();
        self.in_log.clear();
        self.vc_store.retain(|k, _| *k > v);
        self.seen_views.retain(|_, sv| *sv > v);
        self.out.events.push(ReplicaEvent::ViewSynced { view: v });
        self.drain_future();
        self.after_progress();
    }
}
