use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ComponentId, SimError, SimTime};

pub type EventId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub emitter: ComponentId,
    pub emitted_at: SimTime,
}

#[derive(Clone, Debug)]
pub struct Event<P> {
    pub id: EventId,
    pub due: SimTime,
    pub target: ComponentId,
    pub payload: P,
    pub provenance: Provenance,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl<P> Queued<P> {
    fn key(&self) -> (SimTime, EventId) {
        (self.0.due, self.0.id)
    }
}

/// Single-threaded discrete-event queue ordered by `(due, id)`.
///
/// Every dispatched event is folded into a running SHA-256 so two runs can be
/// compared by a single digest.
pub struct Scheduler<P> {
    now: SimTime,
    next_id: EventId,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    dispatched: u64,
    log_hash: Sha256,
    keep_log: bool,
    log: Vec<EventId>,
}

impl<P: Clone> Clone for Scheduler<P> {
    fn clone(&self) -> Self {
        let queue = self
            .queue
            .iter()
            .map(|Reverse(Queued(e))| Reverse(Queued(e.clone())))
            .collect();
        Scheduler {
            now: self.now,
            next_id: self.next_id,
            queue,
            dispatched: self.dispatched,
            log_hash: self.log_hash.clone(),
            keep_log: self.keep_log,
            log: self.log.clone(),
        }
    }
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_id: 0,
            queue: BinaryHeap::new(),
            dispatched: 0,
            log_hash: Sha256::new(),
            keep_log: false,
            log: Vec::new(),
        }
    }

    /// Keep the full dispatched id sequence in memory (tests, replay diffs).
    pub fn with_dispatch_log(mut self) -> Self {
        self.keep_log = true;
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn dispatch_log(&self) -> &[EventId] {
        &self.log
    }

    /// Digest over `(id, due, target)` of every event dispatched so far.
    pub fn dispatch_digest(&self) -> String {
        hex::encode(self.log_hash.clone().finalize())
    }

    pub fn next_due(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(Queued(e))| e.due)
    }

    pub fn schedule(
        &mut self,
        due: SimTime,
        target: ComponentId,
        payload: P,
        emitter: ComponentId,
    ) -> Result<EventId, SimError> {
        if due < self.now {
            return Err(SimError::PastDeadline { due, now: self.now });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push(Reverse(Queued(Event {
            id,
            due,
            target,
            payload,
            provenance: Provenance {
                emitter,
                emitted_at: self.now,
            },
        })));
        Ok(id)
    }

    /// Schedule `delay` after now.
    pub fn schedule_in(
        &mut self,
        delay: SimTime,
        target: ComponentId,
        payload: P,
        emitter: ComponentId,
    ) -> EventId {
        let due = self.now + delay;
        self.schedule(due, target, payload, emitter)
            .expect("now + delay is never in the past")
    }

    fn pop_due(&mut self, until: SimTime) -> Option<Event<P>> {
        match self.queue.peek() {
            Some(Reverse(Queued(e))) if e.due <= until => {}
            _ => return None,
        }
        let Reverse(Queued(ev)) = self.queue.pop()?;
        self.now = ev.due;
        self.dispatched += 1;
        self.log_hash.update(ev.id.to_le_bytes());
        self.log_hash.update(ev.due.0.to_le_bytes());
        self.log_hash.update(format!("{}", ev.target).as_bytes());
        if self.keep_log {
            self.log.push(ev.id);
        }
        Some(ev)
    }

    /// Dispatch every event due at or before `until`, in `(due, id)` order,
    /// then set the clock to `until`. Handlers may schedule further events;
    /// those due before `until` are dispatched in the same call.
    pub fn run_until<F>(&mut self, until: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Scheduler<P>, Event<P>),
    {
        if until < self.now {
            return 0;
        }
        let mut count = 0;
        while let Some(ev) = self.pop_due(until) {
            count += 1;
            handler(self, ev);
        }
        self.now = until;
        count
    }

    /// Dispatch at most one event due at or before `until`.
    pub fn step<F>(&mut self, until: SimTime, handler: F) -> bool
    where
        F: FnOnce(&mut Scheduler<P>, Event<P>),
    {
        match self.pop_due(until) {
            Some(ev) => {
                handler(self, ev);
                true
            }
            None => false,
        }
    }
}
