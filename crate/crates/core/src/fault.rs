//! Declarative Byzantine and network faults. Specs are matched first by id
//! order against every send; each deviation from honest behaviour is logged
//! to the injection trace.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    Command, ConsensusMessage, Digest, MessageKind, PrePrepare, Request, SignedMessage,
    StateReport, View, Vote,
};
use crate::net::{Envelope, InterceptAction, Interceptor, Keyring, SendContext};
use crate::sim::{derive_seed, dur, ComponentId, ReplicaId, SimTime};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaultError {
    #[error("fault {id}: window start {start} is not before end {end}")]
    BadWindow { id: u32, start: SimTime, end: SimTime },
    #[error("fault {0}: byzantine kinds need at least one bound replica")]
    Unbound(u32),
    #[error("fault {id}: {reason}")]
    BadParams { id: u32, reason: String },
    #[error("duplicate fault id {0}")]
    DuplicateId(u32),
    #[error(
        "within-model rule: {count} replicas bound to byzantine faults exceeds f = {f}; \
         set exceeds_fault_bound to run out-of-model"
    )]
    ExceedsFaultBound { count: usize, f: usize },
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Equivocate,
    StateLie,
    SelectiveDrop,
    Delay,
    Crash,
    DelayStretch,
    Partition,
}

impl FaultKind {
    /// Kinds that make the bound replicas themselves faulty. Network kinds
    /// perturb honest replicas' traffic and do not count toward `f`.
    pub fn is_byzantine(self) -> bool {
        matches!(
            self,
            FaultKind::Equivocate | FaultKind::StateLie | FaultKind::SelectiveDrop | FaultKind::Crash
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StateMutation {
    #[default]
    Identity,
    /// Replace the reported digest with a seeded fake.
    DigestSubstitution,
    /// Claim a checkpoint `by` sequence numbers older than the true one.
    RollbackClaim { by: u64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultAction {
    Equivocate,
    StateLie {
        #[serde(default)]
        mutation: StateMutation,
    },
    SelectiveDrop {
        #[serde(default = "one")]
        probability: f64,
    },
    Delay {
        #[serde(with = "dur")]
        delay: SimTime,
    },
    /// Crash the bound replicas at window start, recover them at window end.
    Crash,
    DelayStretch { factor: f64 },
    Partition { groups: Vec<BTreeSet<ComponentId>> },
}

impl FaultAction {
    pub fn kind(&self) -> FaultKind {
        match self {
            FaultAction::Equivocate => FaultKind::Equivocate,
            FaultAction::StateLie { .. } => FaultKind::StateLie,
            FaultAction::SelectiveDrop { .. } => FaultKind::SelectiveDrop,
            FaultAction::Delay { .. } => FaultKind::Delay,
            FaultAction::Crash => FaultKind::Crash,
            FaultAction::DelayStretch { .. } => FaultKind::DelayStretch,
            FaultAction::Partition { .. } => FaultKind::Partition,
        }
    }
}

/// Half-open activation interval; an absent end means until the run ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    #[serde(with = "dur")]
    pub start: SimTime,
    #[serde(default, with = "dur::option", skip_serializing_if = "Option::is_none")]
    pub end: Option<SimTime>,
}

impl Window {
    pub fn always() -> Self {
        Window { start: SimTime::ZERO, end: None }
    }

    pub fn between(start: SimTime, end: SimTime) -> Self {
        Window { start, end: Some(end) }
    }

    pub fn contains(&self, t: SimTime) -> bool {
        t >= self.start && self.end.is_none_or(|e| t < e)
    }

    pub fn shifted(&self, by: SimTime) -> Window {
        Window {
            start: self.start + by,
            end: self.end.map(|e| e + by),
        }
    }
}

/// Message predicate. Empty lists match anything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageMatch {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kinds: Vec<MessageKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub src: Vec<ComponentId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dst: Vec<ComponentId>,
    /// Inclusive view range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<(View, View)>,
}

impl MessageMatch {
    pub fn kinds(kinds: &[MessageKind]) -> Self {
        MessageMatch {
            kinds: kinds.to_vec(),
            ..Self::default()
        }
    }

    fn accepts(&self, env: &Envelope, msg: &ConsensusMessage) -> bool {
        (self.kinds.is_empty() || self.kinds.contains(&msg.kind()))
            && (self.src.is_empty() || self.src.contains(&env.src))
            && (self.dst.is_empty() || self.dst.contains(&env.dst))
            && match (self.views, msg.view()) {
                (None, _) => true,
                (Some((lo, hi)), Some(v)) => (lo..=hi).contains(&v),
                (Some(_), None) => false,
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub id: u32,
    #[serde(flatten)]
    pub action: FaultAction,
    #[serde(default)]
    pub bound_replicas: BTreeSet<ReplicaId>,
    #[serde(default, rename = "match")]
    pub matcher: MessageMatch,
    pub window: Window,
}

impl FaultSpec {
    pub fn kind(&self) -> FaultKind {
        self.action.kind()
    }

    fn binds(&self, src: ComponentId) -> bool {
        self.bound_replicas.is_empty()
            || src.as_replica().is_some_and(|r| self.bound_replicas.contains(&r))
    }

    fn check(&self) -> Vec<FaultError> {
        let mut errs = Vec::new();
        let id = self.id;
        if let Some(end) = self.window.end {
            if self.window.start >= end {
                errs.push(FaultError::BadWindow {
                    id,
                    start: self.window.start,
                    end,
                });
            }
        }
        if self.kind().is_byzantine() && self.bound_replicas.is_empty() {
            errs.push(FaultError::Unbound(id));
        }
        let bad = |reason: &str| FaultError::BadParams {
            id,
            reason: reason.to_string(),
        };
        match &self.action {
            FaultAction::SelectiveDrop { probability } if !(0.0..=1.0).contains(probability) => {
                errs.push(bad("drop probability must be in [0, 1]"))
            }
            FaultAction::DelayStretch { factor } if !(factor.is_finite() && *factor > 0.0) => {
                errs.push(bad("stretch factor must be positive"))
            }
            FaultAction::Partition { groups } => {
                let mut seen = BTreeSet::new();
                if groups.len() < 2 {
                    errs.push(bad("partition needs at least two groups"));
                }
                for c in groups.iter().flatten() {
                    if !seen.insert(*c) {
                        errs.push(bad(&format!("{c} is in two partition groups")));
                    }
                }
            }
            _ => {}
        }
        errs
    }
}

/// Validate a spec set, including the within-model bound. Returns every
/// problem found.
pub fn validate_specs(specs: &[FaultSpec], f: usize, exceeds_fault_bound: bool) -> Vec<FaultError> {
    let mut errs = Vec::new();
    let mut ids = BTreeSet::new();
    for s in specs {
        if !ids.insert(s.id) {
            errs.push(FaultError::DuplicateId(s.id));
        }
        errs.extend(s.check());
    }
    let count = byzantine_set(specs).len();
    if count > f && !exceeds_fault_bound {
        errs.push(FaultError::ExceedsFaultBound { count, f });
    }
    errs
}

/// Union of replicas bound to byzantine-kind specs.
pub fn byzantine_set(specs: &[FaultSpec]) -> BTreeSet<ReplicaId> {
    specs
        .iter()
        .filter(|s| s.kind().is_byzantine())
        .flat_map(|s| s.bound_replicas.iter().copied())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum TraceAction {
    Dropped,
    Delayed {
        #[serde(with = "dur")]
        by: SimTime,
    },
    Stretched { factor: f64 },
    Equivocated { original: Digest, sent: Digest },
    FalsifiedState { checkpoint: u64, digest: Digest },
    Crashed { replica: ReplicaId },
    Recovered { replica: ReplicaId },
    Partitioned,
    Healed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub spec: u32,
    /// Injector-local event number, in interception order.
    pub event_id: u64,
    pub at: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<ComponentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<ComponentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<MessageKind>,
    #[serde(flatten)]
    pub action: TraceAction,
}

/// Alternative request used when a byzantine leader equivocates.
pub fn alternate_request(r: &Request) -> Request {
    let command = match &r.command {
        Command::Setpoint { level_milli } => Command::Setpoint {
            level_milli: level_milli + 1,
        },
        Command::Noop => Command::Setpoint { level_milli: 0 },
        _ => Command::Noop,
    };
    Request {
        command,
        ..r.clone()
    }
}

fn alternate_digest(d: Digest) -> Digest {
    let mut b = d.0.to_vec();
    b.extend_from_slice(b"equivocate");
    Digest::of(&b)
}

/// Per-recipient variants of `msg`: the first half of `recipients` (sorted)
/// get the original, the rest a conflicting statement for the same
/// `(view, seq)`. All variants are signed by the byzantine sender itself.
/// Fewer than two recipients, or a kind with no slot, degenerate to the
/// original for everyone.
pub fn equivocate(
    keys: &Keyring,
    msg: &ConsensusMessage,
    recipients: &[ComponentId],
) -> Vec<(ComponentId, SignedMessage)> {
    let mut to = recipients.to_vec();
    to.sort();
    let original = SignedMessage::sign(keys, msg.sender(), msg);
    let alt = match msg {
        ConsensusMessage::PrePrepare(pp) => {
            let request = alternate_request(&pp.request);
            Some(ConsensusMessage::PrePrepare(PrePrepare {
                digest: request.digest(),
                request,
                ..pp.clone()
            }))
        }
        ConsensusMessage::Prepare(v) => Some(ConsensusMessage::Prepare(Vote {
            digest: alternate_digest(v.digest),
            ..v.clone()
        })),
        ConsensusMessage::Commit(v) => Some(ConsensusMessage::Commit(Vote {
            digest: alternate_digest(v.digest),
            ..v.clone()
        })),
        _ => None,
    };
    let alt = match alt {
        Some(a) if to.len() >= 2 => SignedMessage::sign(keys, msg.sender(), &a),
        _ => return to.into_iter().map(|c| (c, original.clone())).collect(),
    };
    let half = to.len().div_ceil(2);
    to.into_iter()
        .enumerate()
        .map(|(i, c)| (c, if i < half { original.clone() } else { alt.clone() }))
        .collect()
}

/// Apply a state-report mutation. Deterministic given the mutation and RNG.
pub fn falsify_state<R: Rng + ?Sized>(
    mutation: &StateMutation,
    truthful: &StateReport,
    rng: &mut R,
) -> StateReport {
    match mutation {
        StateMutation::Identity => truthful.clone(),
        StateMutation::DigestSubstitution => {
            let mut b = truthful.digest.0.to_vec();
            b.extend_from_slice(&rng.random::<u64>().to_le_bytes());
            StateReport {
                digest: Digest::of(&b),
                ..truthful.clone()
            }
        }
        StateMutation::RollbackClaim { by } => StateReport {
            checkpoint: truthful.checkpoint.saturating_sub((*by).max(1)),
            ..truthful.clone()
        },
    }
}

/// The fault engine for one run: active specs, crash state and the trace.
#[derive(Clone, Debug)]
pub struct FaultInjector {
    specs: Vec<FaultSpec>,
    keys: Keyring,
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
    replicas: BTreeSet<ReplicaId>,
    down: BTreeSet<ReplicaId>,
    trace: Vec<TraceEntry>,
    next_event: u64,
}

impl FaultInjector {
    pub fn new(keys: Keyring, seed: u64, replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        FaultInjector {
            specs: Vec::new(),
            keys,
            seed,
            rngs: Vec::new(),
            replicas: replicas.into_iter().collect(),
            down: BTreeSet::new(),
            trace: Vec::new(),
            next_event: 0,
        }
    }

    /// Add a spec, keeping id order. Validation is the caller's concern.
    pub fn add(&mut self, spec: FaultSpec) {
        let pos = self.specs.partition_point(|s| s.id < spec.id);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("fault.{}", spec.id)));
        self.specs.insert(pos, spec);
        self.rngs.insert(pos, rng);
    }

    pub fn specs(&self) -> &[FaultSpec] {
        &self.specs
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Trace entries from index `from` on, for incremental publishing.
    pub fn trace_since(&self, from: usize) -> &[TraceEntry] {
        &self.trace[from.min(self.trace.len())..]
    }

    pub fn is_down(&self, r: ReplicaId) -> bool {
        self.down.contains(&r)
    }

    pub fn down(&self) -> &BTreeSet<ReplicaId> {
        &self.down
    }

    /// Whether `r` is acting faulty at `now`: crashed, or bound to an active
    /// byzantine spec.
    pub fn is_faulty(&self, r: ReplicaId, now: SimTime) -> bool {
        self.down.contains(&r)
            || self.specs.iter().any(|s| {
                s.kind().is_byzantine() && s.window.contains(now) && s.bound_replicas.contains(&r)
            })
    }

    fn record(&mut self, spec: u32, at: SimTime, action: TraceAction) -> &mut TraceEntry {
        let event = self.next_event;
        self.next_event += 1;
        self.trace.push(TraceEntry {
            spec,
            event_id: event,
            at,
            src: None,
            dst: None,
            kind: None,
            action,
        });
        self.trace.last_mut().expect("just pushed")
    }

    /// Crash a replica. Returns whether it was up; crashing twice is a no-op.
    pub fn crash(&mut self, spec: u32, replica: ReplicaId, at: SimTime) -> Result<bool, FaultError> {
        if !self.replicas.contains(&replica) {
            return Err(FaultError::UnknownReplica(replica));
        }
        if !self.down.insert(replica) {
            return Ok(false);
        }
        self.record(spec, at, TraceAction::Crashed { replica });
        Ok(true)
    }

    pub fn recover(&mut self, spec: u32, replica: ReplicaId, at: SimTime) -> Result<bool, FaultError> {
        if !self.replicas.contains(&replica) {
            return Err(FaultError::UnknownReplica(replica));
        }
        if !self.down.remove(&replica) {
            return Ok(false);
        }
        self.record(spec, at, TraceAction::Recovered { replica });
        Ok(true)
    }

    pub fn note_partition(&mut self, spec: u32, at: SimTime, healed: bool) {
        let action = if healed {
            TraceAction::Healed
        } else {
            TraceAction::Partitioned
        };
        self.record(spec, at, action);
    }

    /// Apply an active StateLie spec bound to `r` to a report it is about
    /// to disclose outside the protocol (the audit plane).
    pub fn disclose_state(&mut self, r: ReplicaId, report: StateReport, now: SimTime) -> StateReport {
        let hit = self.specs.iter().position(|s| {
            matches!(s.action, FaultAction::StateLie { .. })
                && s.window.contains(now)
                && s.bound_replicas.contains(&r)
        });
        let Some(i) = hit else {
            return report;
        };
        let FaultAction::StateLie { mutation } = self.specs[i].action else {
            unreachable!()
        };
        let out = falsify_state(&mutation, &report, &mut self.rngs[i]);
        if out != report {
            let spec = self.specs[i].id;
            let e = self.record(
                spec,
                now,
                TraceAction::FalsifiedState {
                    checkpoint: out.checkpoint,
                    digest: out.digest,
                },
            );
            e.src = Some(r.into());
            e.kind = Some(MessageKind::StateReport);
        }
        out
    }

    fn decide(
        &mut self,
        env: &Envelope,
        msg: &ConsensusMessage,
        ctx: &SendContext<'_>,
        now: SimTime,
    ) -> Option<(u32, InterceptAction, TraceAction)> {
        let i = self.specs.iter().position(|s| {
            !matches!(s.kind(), FaultKind::Crash | FaultKind::Partition)
                && s.window.contains(now)
                && s.binds(env.src)
                && s.matcher.accepts(env, msg)
        })?;
        let id = self.specs[i].id;
        match self.specs[i].action.clone() {
            FaultAction::SelectiveDrop { probability } => {
                let roll: f64 = self.rngs[i].random();
                (roll < probability).then_some((id, InterceptAction::Drop, TraceAction::Dropped))
            }
            FaultAction::Delay { delay } => Some((
                id,
                InterceptAction::Delay(delay),
                TraceAction::Delayed { by: delay },
            )),
            FaultAction::DelayStretch { factor } => Some((
                id,
                InterceptAction::Stretch(factor),
                TraceAction::Stretched { factor },
            )),
            FaultAction::Equivocate => {
                let variants = equivocate(&self.keys, msg, ctx.recipients);
                let (_, mine) = variants.into_iter().find(|(c, _)| *c == env.dst)?;
                let original = msg.digest()?;
                let sent = ConsensusMessage::decode(&mine.body)?.digest()?;
                if sent == original {
                    return None;
                }
                let body = bincode::serialize(&mine).expect("signed message encodes");
                Some((
                    id,
                    InterceptAction::Replace(vec![env.with_body(&self.keys, body)]),
                    TraceAction::Equivocated { original, sent },
                ))
            }
            FaultAction::StateLie { mutation } => {
                let ConsensusMessage::StateReport(r) = msg else {
                    return None;
                };
                let lie = falsify_state(&mutation, r, &mut self.rngs[i]);
                if lie == *r {
                    return None;
                }
                let signed = SignedMessage::sign(
                    &self.keys,
                    env.src,
                    &ConsensusMessage::StateReport(lie.clone()),
                );
                let body = bincode::serialize(&signed).expect("signed message encodes");
                Some((
                    id,
                    InterceptAction::Replace(vec![env.with_body(&self.keys, body)]),
                    TraceAction::FalsifiedState {
                        checkpoint: lie.checkpoint,
                        digest: lie.digest,
                    },
                ))
            }
            FaultAction::Crash | FaultAction::Partition { .. } => None,
        }
    }
}

impl Interceptor for FaultInjector {
    fn intercept(&mut self, env: &Envelope, ctx: &SendContext<'_>, now: SimTime) -> InterceptAction {
        if self.specs.is_empty() {
            return InterceptAction::Deliver;
        }
        let Some(msg) = bincode::deserialize::<SignedMessage>(&env.body)
            .ok()
            .and_then(|s| ConsensusMessage::decode(&s.body))
        else {
            return InterceptAction::Deliver;
        };
        match self.decide(env, &msg, ctx, now) {
            Some((spec, action, trace)) => {
                let e = self.record(spec, now, trace);
                e.src = Some(env.src);
                e.dst = Some(env.dst);
                e.kind = Some(msg.kind());
                action
            }
            None => InterceptAction::Deliver,
        }
    }
}
