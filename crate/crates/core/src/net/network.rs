use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AuthTag, Keyring, Lane, NetError};
use crate::sim::{ComponentId, EventId, RngRegistry, Scheduler, SimTime};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneId(pub String);

impl LaneId {
    pub fn new(s: &str) -> Self {
        LaneId(s.to_string())
    }
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One authenticated message in flight.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub src: ComponentId,
    pub dst: ComponentId,
    pub lane: LaneId,
    pub sent_at: SimTime,
    /// Sender's Lamport value at send.
    pub logical: u64,
    pub body: Vec<u8>,
    pub auth: AuthTag,
}

impl Envelope {
    pub fn seal(
        keys: &Keyring,
        src: ComponentId,
        dst: ComponentId,
        lane: LaneId,
        sent_at: SimTime,
        logical: u64,
        body: Vec<u8>,
    ) -> Self {
        let auth = keys.sign(src, &body);
        Envelope {
            src,
            dst,
            lane,
            sent_at,
            logical,
            body,
            auth,
        }
    }

    pub fn verify(&self, keys: &Keyring) -> bool {
        keys.verify(self.src, &self.body, &self.auth)
    }

    /// Same sender and tag semantics, new body; re-signed by the sender.
    pub fn with_body(&self, keys: &Keyring, body: Vec<u8>) -> Envelope {
        Envelope::seal(
            keys,
            self.src,
            self.dst,
            self.lane.clone(),
            self.sent_at,
            self.logical,
            body,
        )
    }
}

/// Extra context for interception: the full recipient set of the send this
/// envelope belongs to (one element for unicast).
#[derive(Clone, Copy, Debug)]
pub struct SendContext<'a> {
    pub recipients: &'a [ComponentId],
}

#[derive(Clone, Debug, PartialEq)]
pub enum InterceptAction {
    Deliver,
    Drop,
    /// Deliver after the sampled lane delay plus this extra delay.
    Delay(SimTime),
    /// Multiply the sampled lane delay.
    Stretch(f64),
    /// Deliver these envelopes instead of the original.
    Replace(Vec<Envelope>),
}

pub trait Interceptor {
    fn intercept(&mut self, env: &Envelope, ctx: &SendContext<'_>, now: SimTime)
        -> InterceptAction;
}

/// Honest network.
pub struct NoInterception;

impl Interceptor for NoInterception {
    fn intercept(&mut self, _: &Envelope, _: &SendContext<'_>, _: SimTime) -> InterceptAction {
        InterceptAction::Deliver
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    /// Delivery events (id, due time).
    Scheduled(Vec<(EventId, SimTime)>),
    Dropped,
}

#[derive(Clone, Debug)]
struct Partition {
    groups: Vec<BTreeSet<ComponentId>>,
    until: SimTime,
}

impl Partition {
    fn separates(&self, a: ComponentId, b: ComponentId) -> bool {
        let ga = self.groups.iter().position(|g| g.contains(&a));
        let gb = self.groups.iter().position(|g| g.contains(&b));
        matches!((ga, gb), (Some(x), Some(y)) if x != y)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Network {
    lanes: BTreeMap<LaneId, Lane>,
    endpoints: BTreeMap<LaneId, BTreeSet<ComponentId>>,
    partitions: Vec<Partition>,
    partition_drops: u64,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_lane(&mut self, id: LaneId, lane: Lane, rngs: &mut RngRegistry) -> Result<(), NetError> {
        lane.validate()?;
        rngs.register(&Self::stream_name(&id));
        self.lanes.insert(id.clone(), lane);
        self.endpoints.entry(id).or_default();
        Ok(())
    }

    pub fn set_lane(&mut self, id: &LaneId, lane: Lane) -> Result<(), NetError> {
        lane.validate()?;
        match self.lanes.get_mut(id) {
            Some(l) => {
                *l = lane;
                Ok(())
            }
            None => Err(NetError::UnknownLane(id.0.clone())),
        }
    }

    pub fn lane(&self, id: &LaneId) -> Option<&Lane> {
        self.lanes.get(id)
    }

    pub fn register(&mut self, lane: &LaneId, who: ComponentId) -> Result<(), NetError> {
        self.endpoints
            .get_mut(lane)
            .ok_or_else(|| NetError::UnknownLane(lane.0.clone()))?
            .insert(who);
        Ok(())
    }

    fn stream_name(id: &LaneId) -> String {
        format!("net.{}", id.0)
    }

    pub fn partition_drops(&self) -> u64 {
        self.partition_drops
    }

    /// Drop cross-group traffic until `until`. Components outside every group
    /// are unaffected.
    pub fn partition(
        &mut self,
        groups: Vec<BTreeSet<ComponentId>>,
        until: SimTime,
    ) -> Result<(), NetError> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            for c in g {
                if !seen.insert(*c) {
                    return Err(NetError::OverlappingGroups(*c));
                }
            }
        }
        if groups.len() > 1 {
            self.partitions.push(Partition { groups, until });
        }
        Ok(())
    }

    pub fn heal(&mut self) {
        self.partitions.clear();
    }

    pub fn is_partitioned(&self, a: ComponentId, b: ComponentId, now: SimTime) -> bool {
        self.partitions
            .iter()
            .any(|p| now < p.until && p.separates(a, b))
    }

    /// Route one envelope: partition check, interception, delay sampling,
    /// and scheduling of the delivery event(s).
    #[allow(clippy::too_many_arguments)]
    pub fn send<P, I, F>(
        &mut self,
        env: Envelope,
        ctx: &SendContext<'_>,
        sched: &mut Scheduler<P>,
        rngs: &mut RngRegistry,
        interceptor: &mut I,
        mut wrap: F,
    ) -> Result<SendOutcome, NetError>
    where
        I: Interceptor + ?Sized,
        F: FnMut(Envelope) -> P,
    {
        let now = sched.now();
        let lane = self
            .lanes
            .get(&env.lane)
            .ok_or_else(|| NetError::UnknownLane(env.lane.0.clone()))?
            .clone();
        let eps = &self.endpoints[&env.lane];
        for who in [env.src, env.dst] {
            if !eps.contains(&who) {
                return Err(NetError::UnknownEndpoint(who, env.lane.0.clone()));
            }
        }
        self.partitions.retain(|p| now < p.until);
        if self.is_partitioned(env.src, env.dst, now) {
            self.partition_drops += 1;
            return Ok(SendOutcome::Dropped);
        }

        let stream = Self::stream_name(&env.lane);
        let (envs, extra, stretch) = match interceptor.intercept(&env, ctx, now) {
            InterceptAction::Deliver => (vec![env], SimTime::ZERO, None),
            InterceptAction::Drop => return Ok(SendOutcome::Dropped),
            InterceptAction::Delay(d) => (vec![env], d, None),
            InterceptAction::Stretch(k) => (vec![env], SimTime::ZERO, Some(k)),
            InterceptAction::Replace(list) if list.is_empty() => return Ok(SendOutcome::Dropped),
            InterceptAction::Replace(list) => (list, SimTime::ZERO, None),
        };

        let mut scheduled = Vec::with_capacity(envs.len());
        for e in envs {
            let rng = rngs.stream(&stream).expect("lane stream registered");
            let delay = lane.sample_delay(rng, now, stretch) + extra;
            let due = now + delay;
            let target = e.dst;
            let src = e.src;
            let id = sched
                .schedule(due, target, wrap(e), src)
                .expect("delivery is never in the past");
            scheduled.push((id, due));
        }
        Ok(SendOutcome::Scheduled(scheduled))
    }
}
