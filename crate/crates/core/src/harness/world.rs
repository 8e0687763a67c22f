//! The simulated range: replicas, supervisory manager, PLC and plant, OT
//! gateway, fault injector and the live twin, driven by one scheduler.
//! Every observable effect is recorded through the broker.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::advisory::{
    apply_decision, emit_advisory, review, AdvisoryBook, AdvisoryError, Confirmation, EvidenceRef,
    LiveSettings, ManagerDecision, Policy, Verdict,
};
use crate::consensus::{
    leader_of, Command, ConsensusMessage, Digest, Output, Replica, ReplicaEvent, Request, Seq,
    SignedMessage, StateReport, TimerId, View,
};
use crate::fault::{validate_specs, FaultAction, FaultError, FaultInjector, FaultKind, FaultSpec};
use crate::net::{Envelope, Keyring, LaneId, NetError, Network, NoInterception, SendContext};
use crate::plant::{
    plc_cycle, sense, step_plant, PlantError, PlantState, PlcEvent, PlcMode, PlcState,
    SupervisoryCommand, Telemetry,
};
use crate::sim::{derive_seed, ComponentId, Event, LogicalClock, ReplicaId, RngRegistry, Scheduler, SimTime};
use crate::store::{
    AuditEvent, Body, Broker, ExternalAction, ExternalEvent, Severity, SiemEvent, StoreError, Subscription, Topic,
};
use crate::time_gateway::{from_twin_time, to_twin_time, Arrival, GatewayError, Ordered, ReorderBuffer, TimeGateway};
use crate::twin::{state_liars, LiveDigest, RecordedOutput, Twin, TwinError, TwinResult};

use super::report::{build_report, ReportError, RunReport};
use super::scenario::{check_spec_refs, JobKind, Scenario, TwinJob, ValidationErrors};

pub const CONSENSUS_LANE: &str = "consensus";
pub const OT_LANE: &str = "ot";
const SENSOR_STREAM: &str = "plant.sensor";
/// Retransmissions per manager tick.
const RETRANSMIT_BATCH: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid scenario:\n{0}")]
    Scenario(#[from] ValidationErrors),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("fault: {0}")]
    Fault(#[from] FaultError),
    #[error("advisory: {0}")]
    Advisory(#[from] AdvisoryError),
    #[error("twin: {0}")]
    Twin(#[from] TwinError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("invalid external action: {0}")]
    InvalidExternal(String),
}

#[derive(Clone, Debug, Default)]
pub struct WorldOptions {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    /// Replaces the scenario's scripted externals (replay of a recorded log).
    pub externals: Option<Vec<ExternalEvent>>,
    /// Twin outputs to re-publish at their recorded times.
    pub outputs: Vec<RecordedOutput>,
    pub disable_twin: bool,
    /// Overrides the scenario's auto-confirm setting.
    pub auto_confirm: Option<bool>,
    pub broker: Option<Arc<Broker>>,
}

#[derive(Clone, Debug)]
enum Ev {
    Net(Envelope),
    Timer(ReplicaId, TimerId),
    PlcCycle,
    ManagerTick,
    FaultEdge { spec: u32, start: bool },
    GatewayDrain,
}

#[derive(Clone, Debug)]
struct Pending {
    request: Request,
    issued_at: SimTime,
    last_sent: SimTime,
    replies: BTreeMap<(Seq, Digest), BTreeSet<ReplicaId>>,
}

/// A replacement waiting for its learner to catch up.
#[derive(Clone, Debug)]
struct Staged {
    old: ReplicaId,
    new: ReplicaId,
    advisory: Option<u64>,
    join_seq: Option<Seq>,
}

/// The supervisory manager: the single client of the ordering cluster.
#[derive(Clone, Debug)]
struct Manager {
    next_req: u64,
    pending: BTreeMap<u64, Pending>,
    rotation: usize,
    members: Vec<ReplicaId>,
    spares: Vec<ReplicaId>,
    staged: Vec<Staged>,
    watchdog_override: Option<u32>,
    timeout: SimTime,
    book: AdvisoryBook,
    policy: Policy,
    advisories: Subscription,
}

#[derive(Clone)]
pub struct World {
    scenario: Arc<Scenario>,
    seed: u64,
    auto_confirm: bool,
    broker: Arc<Broker>,
    gateway: TimeGateway,
    keys: Keyring,
    sched: Scheduler<Ev>,
    rngs: RngRegistry,
    net: Network,
    faults: FaultInjector,
    trace_cursor: usize,
    replicas: BTreeMap<ReplicaId, Replica>,
    clocks: BTreeMap<ComponentId, LogicalClock>,
    view_installs: BTreeMap<View, SimTime>,
    manager: Manager,
    plant: PlantState,
    valve: f64,
    plc: PlcState,
    plc_applied: u64,
    /// Newest undelivered command and its receipt time.
    pending_cmd: Option<(SupervisoryCommand, SimTime)>,
    modes: BTreeMap<SimTime, PlcMode>,
    reorder: ReorderBuffer<Telemetry>,
    next_arrival: u64,
    externals: VecDeque<ExternalEvent>,
    next_external: u64,
    outputs: VecDeque<RecordedOutput>,
    jobs: VecDeque<TwinJob>,
    twin: Option<Twin>,
    next_advisory: u64,
    end: SimTime,
    stopped: bool,
    finished: bool,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("scenario", &self.scenario.name)
            .field("seed", &self.seed)
            .field("now", &self.sched.now())
            .finish()
    }
}

impl World {
    pub fn new(scenario: Scenario, opts: WorldOptions) -> Result<World, WorldError> {
        scenario.validate()?;
        let seed = opts.seed.unwrap_or(scenario.seed);
        let auto_confirm = opts.auto_confirm.unwrap_or(scenario.auto_confirm);
        let topo = &scenario.topology;
        let keys = Keyring::new(derive_seed(seed, "keys"));
        let mut rngs = RngRegistry::new(seed);
        rngs.register(SENSOR_STREAM);
        let mut net = Network::new();
        let (cl, ol) = (LaneId::new(CONSENSUS_LANE), LaneId::new(OT_LANE));
        net.add_lane(cl.clone(), topo.lanes.consensus.clone(), &mut rngs)?;
        net.add_lane(ol.clone(), topo.lanes.ot.clone(), &mut rngs)?;
        let all = topo.all_replicas();
        for r in &all {
            net.register(&cl, (*r).into())?;
        }
        net.register(&cl, ComponentId::Manager)?;
        for c in [ComponentId::Manager, ComponentId::Plc, ComponentId::Gateway] {
            net.register(&ol, c)?;
        }
        let members = topo.members();
        let cfg = scenario.consensus_config();
        let replicas = all
            .iter()
            .map(|r| (*r, Replica::new(*r, cfg.clone(), members.clone(), keys.clone())))
            .collect();
        let faults = FaultInjector::new(keys.clone(), derive_seed(seed, "faults"), all.iter().copied());
        let p = &scenario.plc;
        let plc = PlcState {
            setpoint: p.setpoint,
            mode: PlcMode::Normal,
            last_supervisory_at: SimTime::ZERO,
            watchdog_window: p.watchdog_window,
            cycle_period: p.cycle_period,
            safety_bounds: p.safety_bounds,
            gain: p.gain,
        };
        let broker = opts.broker.unwrap_or_else(|| Arc::new(Broker::in_memory()));
        let advisories = broker.subscribe("manager", Topic::TwinAdvisory, broker.head(Topic::TwinAdvisory))?;
        let manager = Manager {
            next_req: 1,
            pending: BTreeMap::new(),
            rotation: 0,
            members: members.clone(),
            spares: topo.spare_ids(),
            staged: Vec::new(),
            watchdog_override: None,
            timeout: scenario.consensus.timeout,
            book: AdvisoryBook::default(),
            policy: scenario.policy(),
            advisories,
        };
        let mut externals: Vec<ExternalEvent> = match opts.externals {
            Some(log) => log,
            None => scenario
                .external
                .iter()
                .enumerate()
                .map(|(i, e)| ExternalEvent {
                    seq: i as u64,
                    at: e.at,
                    principal: e.principal.clone(),
                    action: e.action.clone(),
                })
                .collect(),
        };
        externals.sort_by_key(|e| (e.at, e.seq));
        let next_external = externals.iter().map(|e| e.seq + 1).max().unwrap_or(0);
        let mut outputs = opts.outputs;
        outputs.sort_by_key(|o| (o.at, o.logical));
        let next_advisory = outputs
            .iter()
            .filter_map(|o| match &o.body {
                Body::Advisory(a) => Some(a.id + 1),
                _ => None,
            })
            .max()
            .unwrap_or(1);
        let mut jobs: Vec<TwinJob> = if opts.disable_twin { Vec::new() } else { scenario.twin.jobs.clone() };
        jobs.sort_by_key(|j| j.at);
        let scenario = Arc::new(scenario);
        let twin = (!opts.disable_twin).then(|| Twin::new(scenario.clone(), seed, auto_confirm));

        let mut w = World {
            seed,
            auto_confirm,
            broker,
            gateway: TimeGateway::default(),
            keys,
            sched: Scheduler::new(),
            rngs,
            net,
            faults,
            trace_cursor: 0,
            replicas,
            clocks: BTreeMap::new(),
            view_installs: [(0, SimTime::ZERO)].into_iter().collect(),
            manager,
            plant: scenario.plant.clone(),
            valve: scenario.plant.valve,
            plc,
            plc_applied: 0,
            pending_cmd: None,
            modes: BTreeMap::new(),
            reorder: ReorderBuffer::new(scenario.twin.reorder_window),
            next_arrival: 0,
            externals: externals.into(),
            next_external,
            outputs: outputs.into(),
            jobs: jobs.into(),
            twin,
            next_advisory,
            end: scenario.duration,
            stopped: false,
            finished: false,
            scenario,
        };
        w.start()?;
        Ok(w)
    }

    fn start(&mut self) -> Result<(), WorldError> {
        let sc = self.scenario.clone();
        let mut specs = sc.faults.clone();
        specs.extend(sc.injected_specs());
        self.publish(
            "harness",
            Topic::OtAudit,
            Body::Audit(AuditEvent::RunStarted {
                scenario_hash: sc.hash(),
                seed: self.seed,
                f: sc.topology.f,
                members: sc.topology.members(),
                spares: sc.topology.spare_ids(),
                timeout: sc.consensus.timeout,
                byzantine: crate::fault::byzantine_set(&specs).into_iter().collect(),
                liveness_factor: sc.twin.liveness_factor,
                storm_rate: sc.twin.storm_rate,
                safety_bounds: sc.plc.safety_bounds,
                auto_confirm: self.auto_confirm,
            }),
        )?;
        for spec in sc.faults.iter().cloned() {
            self.add_fault(spec);
        }
        self.sched
            .schedule(sc.plc.cycle_period, ComponentId::Plc, Ev::PlcCycle, ComponentId::Harness)
            .expect("future event");
        self.sched
            .schedule(sc.manager.request_interval, ComponentId::Manager, Ev::ManagerTick, ComponentId::Harness)
            .expect("future event");
        self.flush_trace()
    }

    // ---- accessors ----

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    pub fn set_end(&mut self, end: SimTime) {
        self.end = end;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    /// Swap the store, e.g. after a broker restart. Records are stamped by
    /// the world, so their content does not depend on the broker instance.
    pub fn set_broker(&mut self, broker: Arc<Broker>) {
        self.broker = broker;
    }

    pub fn replicas(&self) -> &BTreeMap<ReplicaId, Replica> {
        &self.replicas
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    pub fn plc(&self) -> &PlcState {
        &self.plc
    }

    pub fn modes(&self) -> &BTreeMap<SimTime, PlcMode> {
        &self.modes
    }

    pub fn current_timeout(&self) -> SimTime {
        self.manager.timeout
    }

    pub fn members(&self) -> &[ReplicaId] {
        &self.manager.members
    }

    pub fn decisions(&self) -> impl Iterator<Item = &ManagerDecision> {
        self.manager.book.decisions()
    }

    pub fn pending_confirmations(&self) -> Vec<ManagerDecision> {
        self.manager.book.pending_confirmation().cloned().collect()
    }

    pub fn twin(&self) -> Option<&Twin> {
        self.twin.as_ref()
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.now() >= self.end
    }

    /// Ground truth for mirror fidelity checks.
    pub fn live_digest(&self) -> LiveDigest {
        LiveDigest {
            cursors: [Topic::OtTelemetry, Topic::OtAudit]
                .into_iter()
                .map(|t| (t, self.broker.head(t)))
                .collect(),
            logs: self
                .replicas
                .iter()
                .filter(|(_, r)| !r.decided_log().is_empty())
                .map(|(id, r)| (*id, r.decided_log().iter().map(|(s, e)| (*s, e.digest)).collect()))
                .collect(),
            modes: self.modes.clone(),
        }
    }

    /// A copy of the world with its own in-memory store, for branching.
    pub fn fork(&self) -> World {
        let mut w = self.clone();
        w.broker = Arc::new(self.broker.fork());
        w.twin = None;
        w.jobs.clear();
        w
    }

    // ---- driving ----

    /// Run to `t` (capped at the end of the run), applying externals, twin
    /// outputs and twin jobs at their times.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), WorldError> {
        let t = t.min(self.end);
        while !self.stopped && self.now() <= t {
            let b = [
                self.externals.front().map(|e| e.at),
                self.outputs.front().map(|o| o.at),
                self.jobs.front().map(|j| j.at),
            ]
            .into_iter()
            .flatten()
            .filter(|x| *x <= t)
            .min()
            .unwrap_or(t)
            .max(self.now());
            self.drive(b)?;
            while self.externals.front().is_some_and(|e| e.at <= b) && !self.stopped {
                let e = self.externals.pop_front().expect("front exists");
                self.apply_external(e)?;
            }
            while self.outputs.front().is_some_and(|o| o.at <= b) {
                let o = self.outputs.pop_front().expect("front exists");
                if let Body::Advisory(a) = &o.body {
                    self.next_advisory = self.next_advisory.max(a.id + 1);
                }
                self.publish("twin", o.topic, o.body)?;
            }
            while self.jobs.front().is_some_and(|j| j.at <= b) && !self.stopped {
                let j = self.jobs.pop_front().expect("front exists");
                self.run_job(j)?;
            }
            if b >= t {
                break;
            }
        }
        Ok(())
    }

    /// Run to the end and produce the run report.
    pub fn run(&mut self) -> Result<RunReport, WorldError> {
        self.run_until(self.end)?;
        self.finish()
    }

    /// Flush buffered telemetry, mark completion and report on the whole run.
    pub fn finish(&mut self) -> Result<RunReport, WorldError> {
        if !self.finished {
            for o in self.reorder.flush() {
                self.publish_ordered(o)?;
            }
            let at = self.now();
            self.publish("harness", Topic::OtAudit, Body::Audit(AuditEvent::RunCompleted { at }))?;
            self.finished = true;
        }
        Ok(build_report(&self.broker, SimTime::ZERO, self.now())?)
    }

    fn drive(&mut self, until: SimTime) -> Result<(), WorldError> {
        while self.sched.next_due().is_some_and(|d| d <= until) {
            let mut ev = None;
            self.sched.step(until, |_, e| ev = Some(e));
            if let Some(ev) = ev {
                self.dispatch(ev)?;
            }
        }
        self.sched.run_until(until, |_, _| {});
        Ok(())
    }

    fn dispatch(&mut self, ev: Event<Ev>) -> Result<(), WorldError> {
        let now = ev.due;
        match ev.payload {
            Ev::Net(env) => self.deliver(env)?,
            Ev::Timer(r, id) => {
                if !self.faults.is_down(r) {
                    if let Some(rep) = self.replicas.get_mut(&r) {
                        let out = rep.on_timeout(id, now);
                        self.absorb(r, out)?;
                    }
                }
            }
            Ev::PlcCycle => self.plc_cycle()?,
            Ev::ManagerTick => self.manager_tick()?,
            Ev::FaultEdge { spec, start } => self.fault_edge(spec, start)?,
            Ev::GatewayDrain => {
                let tt = to_twin_time(now, self.gateway.mapping())?;
                for o in self.reorder.drain_ready(tt) {
                    self.publish_ordered(o)?;
                }
            }
        }
        self.flush_trace()
    }

    // ---- recording ----

    fn publish(&mut self, principal: &str, topic: Topic, body: Body) -> Result<u64, WorldError> {
        let stamp = self.gateway.stamp_now(self.now())?;
        Ok(self.broker.append(principal, topic, body, stamp, SimTime::ZERO, false)?)
    }

    fn audit(&mut self, principal: &str, ev: AuditEvent) -> Result<u64, WorldError> {
        self.publish(principal, Topic::OtAudit, Body::Audit(ev))
    }

    fn siem(&mut self, severity: Severity, category: &str, summary: String, source: Topic, offset: u64) -> Result<(), WorldError> {
        self.publish(
            "harness",
            Topic::SiemEvents,
            Body::Siem(SiemEvent {
                severity,
                category: category.into(),
                summary,
                source_topic: source,
                source_offset: offset,
            }),
        )?;
        Ok(())
    }

    fn warn(&mut self, category: &str, summary: String) -> Result<(), WorldError> {
        let offset = self.broker.head(Topic::OtAudit).saturating_sub(1);
        self.siem(Severity::Warning, category, summary, Topic::OtAudit, offset)
    }

    fn flush_trace(&mut self) -> Result<(), WorldError> {
        let fresh = self.faults.trace_since(self.trace_cursor).to_vec();
        self.trace_cursor += fresh.len();
        for e in fresh {
            self.audit("harness", AuditEvent::Injection(e))?;
        }
        Ok(())
    }

    fn publish_ordered(&mut self, o: Ordered<Telemetry>) -> Result<(), WorldError> {
        self.broker
            .append("plc", Topic::OtTelemetry, Body::Telemetry(o.event), o.stamp, o.delay, o.late)?;
        Ok(())
    }

    // ---- network ----

    fn send(&mut self, lane: &str, src: ComponentId, to: &[ComponentId], body: Vec<u8>) -> Result<(), WorldError> {
        let lane_id = LaneId::new(lane);
        let now = self.now();
        for &dst in to {
            if dst == src {
                continue;
            }
            let logical = self.clocks.entry(src).or_default().tick();
            let env = Envelope::seal(&self.keys, src, dst, lane_id.clone(), now, logical, body.clone());
            let ctx = SendContext { recipients: to };
            if lane == CONSENSUS_LANE {
                self.net
                    .send(env, &ctx, &mut self.sched, &mut self.rngs, &mut self.faults, Ev::Net)?;
            } else {
                self.net
                    .send(env, &ctx, &mut self.sched, &mut self.rngs, &mut NoInterception, Ev::Net)?;
            }
        }
        Ok(())
    }

    fn send_signed(&mut self, src: ComponentId, to: &[ComponentId], signed: &SignedMessage) -> Result<(), WorldError> {
        let body = bincode::serialize(signed).expect("signed message encodes");
        self.send(CONSENSUS_LANE, src, to, body)
    }

    fn deliver(&mut self, env: Envelope) -> Result<(), WorldError> {
        if !env.verify(&self.keys) {
            return Ok(());
        }
        let now = self.now();
        self.clocks.entry(env.dst).or_default().observe(env.logical);
        match env.dst {
            ComponentId::Replica(r) => {
                if self.faults.is_down(r) {
                    return Ok(());
                }
                let Ok(signed) = bincode::deserialize::<SignedMessage>(&env.body) else {
                    return Ok(());
                };
                if let Some(rep) = self.replicas.get_mut(&r) {
                    let out = rep.handle(&signed, now);
                    self.absorb(r, out)?;
                }
            }
            ComponentId::Manager => {
                let Some(msg) = bincode::deserialize::<SignedMessage>(&env.body)
                    .ok()
                    .and_then(|s| s.open(&self.keys))
                else {
                    return Ok(());
                };
                match msg {
                    ConsensusMessage::Reply(reply) => self.on_reply(reply)?,
                    ConsensusMessage::StateReport(report) => self.on_state_report(report)?,
                    _ => {}
                }
            }
            ComponentId::Plc => {
                if let Ok(cmd) = serde_json::from_slice::<SupervisoryCommand>(&env.body) {
                    let newer = cmd.seq > self.plc_applied && self.pending_cmd.as_ref().is_none_or(|(c, _)| c.seq < cmd.seq);
                    if newer {
                        self.pending_cmd = Some((cmd, now));
                    }
                }
            }
            ComponentId::Gateway => {
                if let Ok(tel) = serde_json::from_slice::<Telemetry>(&env.body) {
                    let stamp = self.gateway.stamp_now(env.sent_at)?;
                    let id = self.next_arrival;
                    self.next_arrival += 1;
                    let a = Arrival {
                        id,
                        stamp: Some(stamp),
                        arrival: now,
                        event: tel,
                    };
                    match self.reorder.push(a)? {
                        Some(late) => self.publish_ordered(late)?,
                        None => {
                            let window = self.scenario.twin.reorder_window.as_micros();
                            let due = from_twin_time(stamp.twin.add_micros(window), self.gateway.mapping())?.max(now);
                            self.sched
                                .schedule(due, ComponentId::Gateway, Ev::GatewayDrain, ComponentId::Gateway)
                                .expect("drain is not in the past");
                        }
                    }
                }
            }
            ComponentId::Harness | ComponentId::Twin => {}
        }
        Ok(())
    }

    // ---- replicas ----

    fn absorb(&mut self, r: ReplicaId, out: Output) -> Result<(), WorldError> {
        let now = self.now();
        for t in out.timers {
            self.sched
                .schedule(t.deadline.max(now), r.into(), Ev::Timer(r, t.id), r.into())
                .expect("timer is not in the past");
        }
        for o in out.outbound {
            self.send_signed(r.into(), &o.to, &o.signed)?;
        }
        let principal = r.to_string();
        for d in out.decisions {
            self.audit(
                &principal,
                AuditEvent::Decision {
                    replica: r,
                    seq: d.seq,
                    req_id: d.request.req_id,
                    digest: d.digest,
                    view: d.view,
                    quorum: d.quorum.len(),
                },
            )?;
        }
        for e in out.events {
            self.replica_event(r, e)?;
        }
        Ok(())
    }

    fn replica_event(&mut self, r: ReplicaId, e: ReplicaEvent) -> Result<(), WorldError> {
        let now = self.now();
        let principal = r.to_string();
        match e {
            ReplicaEvent::StableCheckpoint { seq, digest } => {
                let view = self.replicas[&r].view();
                let report = StateReport {
                    sender: r,
                    view,
                    checkpoint: seq,
                    digest,
                    transfer: None,
                };
                let shown = self.faults.disclose_state(r, report, now);
                self.audit(
                    &principal,
                    AuditEvent::CheckpointReport {
                        replica: r,
                        seq: shown.checkpoint,
                        digest: shown.digest,
                    },
                )?;
            }
            ReplicaEvent::NewViewInstalled { view, .. } => {
                self.audit(&principal, AuditEvent::Replica { replica: r, detail: e })?;
                if !self.view_installs.contains_key(&view) {
                    let (prev, prev_at) = self
                        .view_installs
                        .range(..view)
                        .next_back()
                        .map(|(v, t)| (*v, *t))
                        .unwrap_or((0, SimTime::ZERO));
                    self.view_installs.insert(view, now);
                    let leader = leader_of(prev, self.replicas[&r].membership());
                    if !self.was_faulty(leader, prev_at, now) {
                        let off = self.audit(
                            "harness",
                            AuditEvent::FalseSuspicion {
                                from_view: prev,
                                to_view: view,
                                leader,
                            },
                        )?;
                        self.siem(
                            Severity::Warning,
                            "false_suspicion",
                            format!("correct leader {leader} of view {prev} replaced by view {view}"),
                            Topic::OtAudit,
                            off,
                        )?;
                    }
                }
            }
            detail => {
                self.audit(&principal, AuditEvent::Replica { replica: r, detail })?;
            }
        }
        Ok(())
    }

    /// Whether `r` was bound to a byzantine spec active at any point of
    /// `[from, to]`, or is down now.
    fn was_faulty(&self, r: ReplicaId, from: SimTime, to: SimTime) -> bool {
        self.faults.is_down(r)
            || self.faults.specs().iter().any(|s| {
                s.kind().is_byzantine()
                    && s.bound_replicas.contains(&r)
                    && s.window.start <= to
                    && s.window.end.is_none_or(|e| e > from)
            })
    }

    // ---- faults ----

    /// Install a spec whose window is already absolute.
    fn add_fault(&mut self, spec: FaultSpec) {
        let now = self.now();
        if matches!(spec.kind(), FaultKind::Crash | FaultKind::Partition) {
            let (id, w) = (spec.id, spec.window);
            self.sched
                .schedule(w.start.max(now), ComponentId::Harness, Ev::FaultEdge { spec: id, start: true }, ComponentId::Harness)
                .expect("edge is not in the past");
            if let Some(end) = w.end {
                self.sched
                    .schedule(end.max(now), ComponentId::Harness, Ev::FaultEdge { spec: id, start: false }, ComponentId::Harness)
                    .expect("edge is not in the past");
            }
        }
        self.faults.add(spec);
    }

    fn fault_edge(&mut self, id: u32, start: bool) -> Result<(), WorldError> {
        let Some(spec) = self.faults.specs().iter().find(|s| s.id == id).cloned() else {
            return Ok(());
        };
        let now = self.now();
        match (&spec.action, start) {
            (FaultAction::Crash, true) => {
                for r in &spec.bound_replicas {
                    self.faults.crash(id, *r, now)?;
                }
            }
            (FaultAction::Crash, false) => {
                for r in &spec.bound_replicas {
                    if self.faults.recover(id, *r, now)? {
                        if let Some(rep) = self.replicas.get_mut(r) {
                            let out = rep.recover(now);
                            self.absorb(*r, out)?;
                        }
                    }
                }
            }
            (FaultAction::Partition { groups }, true) => {
                self.net.partition(groups.clone(), spec.window.end.unwrap_or(SimTime::MAX))?;
                self.faults.note_partition(id, now, false);
            }
            (FaultAction::Partition { .. }, false) => self.faults.note_partition(id, now, true),
            _ => {}
        }
        Ok(())
    }

    // ---- plant side ----

    fn plc_cycle(&mut self) -> Result<(), WorldError> {
        let now = self.now();
        let period = self.plc.cycle_period;
        self.plant = step_plant(&self.plant, self.valve, period)?;
        let rng = self.rngs.stream(SENSOR_STREAM).expect("sensor stream registered");
        let (reading, noisy) = sense(&self.plant, self.scenario.plc.sensor_noise, rng);
        let cmd = self.pending_cmd.take();
        if let Some((c, _)) = &cmd {
            self.plc_applied = c.seq;
        }
        let out = plc_cycle(&mut self.plc, reading, noisy, cmd.as_ref().map(|(c, at)| (c, *at)), now);
        self.valve = out.valve_cmd;
        self.modes.insert(now, out.telemetry.mode);
        for e in out.events {
            let fail_safe = matches!(e, PlcEvent::FailSafeEngaged { .. });
            let off = self.audit("plc", AuditEvent::Plc { detail: e })?;
            if fail_safe {
                self.siem(
                    Severity::Critical,
                    "fail_safe",
                    format!("PLC entered fail-safe at level {reading:.3}"),
                    Topic::OtAudit,
                    off,
                )?;
            }
        }
        let body = serde_json::to_vec(&out.telemetry).expect("telemetry encodes");
        self.send(OT_LANE, ComponentId::Plc, &[ComponentId::Gateway], body)?;
        self.sched.schedule_in(period, ComponentId::Plc, Ev::PlcCycle, ComponentId::Plc);
        Ok(())
    }

    // ---- manager ----

    fn all_replica_ids(&self) -> Vec<ComponentId> {
        self.replicas.keys().map(|r| (*r).into()).collect()
    }

    fn manager_tick(&mut self) -> Result<(), WorldError> {
        self.review_advisories()?;
        self.retransmit()?;
        let sp = &self.scenario.manager.setpoints;
        let level = sp[self.manager.rotation % sp.len()];
        self.manager.rotation += 1;
        self.issue(Command::Setpoint {
            level_milli: (level * 1000.0).round() as i64,
        })?;
        let interval = self.scenario.manager.request_interval;
        self.sched
            .schedule_in(interval, ComponentId::Manager, Ev::ManagerTick, ComponentId::Manager);
        Ok(())
    }

    fn issue(&mut self, command: Command) -> Result<u64, WorldError> {
        let now = self.now();
        let req_id = self.manager.next_req;
        self.manager.next_req += 1;
        let request = Request {
            client: ComponentId::Manager,
            req_id,
            command: command.clone(),
        };
        self.audit(
            "manager",
            AuditEvent::ManagerRequest {
                req_id,
                command,
                retransmit: false,
            },
        )?;
        self.send_request(&request)?;
        self.manager.pending.insert(
            req_id,
            Pending {
                request,
                issued_at: now,
                last_sent: now,
                replies: BTreeMap::new(),
            },
        );
        Ok(req_id)
    }

    fn send_request(&mut self, request: &Request) -> Result<(), WorldError> {
        let signed = SignedMessage::sign(&self.keys, ComponentId::Manager, &ConsensusMessage::Request(request.clone()));
        let to = self.all_replica_ids();
        self.send_signed(ComponentId::Manager, &to, &signed)
    }

    fn retransmit(&mut self) -> Result<(), WorldError> {
        let now = self.now();
        let after = self.scenario.retransmit_after();
        let due: Vec<u64> = self
            .manager
            .pending
            .values()
            .filter(|p| now.saturating_sub(p.last_sent) >= after)
            .map(|p| p.request.req_id)
            .take(RETRANSMIT_BATCH)
            .collect();
        for id in due {
            let request = {
                let p = self.manager.pending.get_mut(&id).expect("pending exists");
                p.last_sent = now;
                p.request.clone()
            };
            self.audit(
                "manager",
                AuditEvent::ManagerRequest {
                    req_id: id,
                    command: request.command.clone(),
                    retransmit: true,
                },
            )?;
            self.send_request(&request)?;
        }
        Ok(())
    }

    fn on_reply(&mut self, reply: crate::consensus::Reply) -> Result<(), WorldError> {
        if !self.manager.members.contains(&reply.sender) {
            return Ok(());
        }
        let f = self.scenario.topology.f;
        let Some(p) = self.manager.pending.get_mut(&reply.req_id) else {
            return Ok(());
        };
        if p.request.command != reply.command {
            return Ok(());
        }
        let voters = p.replies.entry((reply.seq, reply.digest)).or_default();
        voters.insert(reply.sender);
        if voters.len() > f {
            let p = self.manager.pending.remove(&reply.req_id).expect("pending exists");
            self.confirm(p, reply.seq)?;
        }
        Ok(())
    }

    fn confirm(&mut self, p: Pending, seq: Seq) -> Result<(), WorldError> {
        let now = self.now();
        let command = p.request.command;
        self.audit(
            "manager",
            AuditEvent::ManagerConfirmed {
                req_id: p.request.req_id,
                seq,
                command: command.clone(),
                issued_at: p.issued_at,
                latency: now.saturating_sub(p.issued_at),
            },
        )?;
        match command {
            Command::Setpoint { level_milli } => {
                let cmd = SupervisoryCommand {
                    seq,
                    setpoint: level_milli as f64 / 1000.0,
                    watchdog_window: self.manager.watchdog_override,
                };
                self.publish("manager", Topic::OtActuation, Body::Actuation(cmd.clone()))?;
                let body = serde_json::to_vec(&cmd).expect("command encodes");
                self.send(OT_LANE, ComponentId::Manager, &[ComponentId::Plc], body)?;
            }
            Command::Configure { delta, advisory } => {
                self.audit(
                    "manager",
                    AuditEvent::ConfigChange {
                        seq,
                        delta: delta.clone(),
                        advisory,
                    },
                )?;
                if let Some(w) = delta.watchdog_window.filter(|w| *w > 0) {
                    self.manager.watchdog_override = Some(w);
                }
                if let Some(d) = delta.ot_base_delay {
                    self.set_lane_delay(OT_LANE, d)?;
                }
                if let Some(t) = delta.timeout.filter(|t| t.0 > 0) {
                    self.manager.timeout = t;
                }
            }
            Command::Join { replica } => {
                for s in self.manager.staged.iter_mut().filter(|s| s.new == replica) {
                    s.join_seq = Some(seq);
                }
            }
            Command::Replace { old, new, .. } => {
                if let Some(pos) = self.manager.members.iter().position(|m| *m == old) {
                    self.manager.members[pos] = new;
                }
            }
            Command::Noop => {}
        }
        Ok(())
    }

    /// A learner's checkpoint report shows it has caught up past its join.
    fn on_state_report(&mut self, report: StateReport) -> Result<(), WorldError> {
        let ready: Vec<usize> = self
            .manager
            .staged
            .iter()
            .enumerate()
            .filter(|(_, s)| s.new == report.sender && s.join_seq.is_some_and(|j| report.checkpoint >= j))
            .map(|(i, _)| i)
            .collect();
        for i in ready.into_iter().rev() {
            let s = self.manager.staged.remove(i);
            self.issue(Command::Replace {
                old: s.old,
                new: s.new,
                advisory: s.advisory,
            })?;
        }
        Ok(())
    }

    fn set_lane_delay(&mut self, lane: &str, d: SimTime) -> Result<(), WorldError> {
        let id = LaneId::new(lane);
        let l = self.net.lane(&id).expect("lane exists").with_base_delay(d);
        self.net.set_lane(&id, l)?;
        Ok(())
    }

    fn review_advisories(&mut self) -> Result<(), WorldError> {
        let now = self.now();
        for rec in self.manager.advisories.poll(&self.broker) {
            let Body::Advisory(adv) = &rec.body else { continue };
            let d = match review(&mut self.manager.book, adv, &self.manager.policy, now) {
                Ok(d) => d,
                Err(e) => {
                    self.warn("advisory", format!("advisory {} not reviewed: {e}", adv.id))?;
                    continue;
                }
            };
            self.audit("manager", AuditEvent::ManagerDecision(d.clone()))?;
            match d.verdict {
                Verdict::Apply => self.execute_decision(&d)?,
                Verdict::Defer if self.auto_confirm => {
                    let c = Confirmation {
                        approve: true,
                        operator: "auto-confirm".into(),
                        at: now,
                        rationale: "auto-confirm enabled".into(),
                    };
                    let d = self.manager.book.confirm(adv.id, c)?;
                    self.audit(
                        "manager",
                        AuditEvent::AdvisoryConfirmed {
                            advisory: adv.id,
                            approve: true,
                            operator: "auto-confirm".into(),
                        },
                    )?;
                    self.execute_decision(&d)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn execute_decision(&mut self, d: &ManagerDecision) -> Result<(), WorldError> {
        let members = self.manager.members.clone();
        let f = self.scenario.topology.f;
        match apply_decision(d, &members, &mut self.manager.spares, f) {
            Ok(cmds) => self.issue_all(cmds),
            Err(e) => self.warn("advisory", format!("advisory {} not applied: {e}", d.advisory)),
        }
    }

    /// Issue commands, staging each replace until its learner catches up.
    fn issue_all(&mut self, cmds: Vec<Command>) -> Result<(), WorldError> {
        for c in cmds {
            match c {
                Command::Replace { old, new, advisory } => self.manager.staged.push(Staged {
                    old,
                    new,
                    advisory,
                    join_seq: None,
                }),
                Command::Join { replica } => {
                    let members = self.manager.members.clone();
                    if let Some(rep) = self.replicas.get_mut(&replica) {
                        rep.activate_learner(members, Vec::new());
                    }
                    self.issue(c)?;
                }
                other => {
                    self.issue(other)?;
                }
            }
        }
        Ok(())
    }

    // ---- externals ----

    /// Validate and apply an external action now. Returns the logged event.
    pub fn submit(&mut self, principal: &str, action: ExternalAction) -> Result<ExternalEvent, WorldError> {
        self.broker.policy().check_publish(principal, Topic::RangeExternal)?;
        let now = self.now();
        match &action {
            ExternalAction::InjectFault { spec } => self.check_new_faults(std::slice::from_ref(spec))?,
            ExternalAction::Branch { delta, faults, .. } => {
                let errs = delta.check(&self.scenario.topology);
                if !errs.is_empty() {
                    return Err(WorldError::InvalidExternal(errs.join("; ")));
                }
                self.check_new_faults(faults)?;
            }
            ExternalAction::Confirm { advisory, .. } => match self.manager.book.get(*advisory) {
                None => return Err(AdvisoryError::Unknown(*advisory).into()),
                Some(d) if d.verdict != Verdict::Defer || d.confirmation.is_some() => {
                    return Err(AdvisoryError::AlreadyDecided(*advisory).into())
                }
                Some(_) => {}
            },
            ExternalAction::Stop => {}
        }
        let ev = ExternalEvent {
            seq: self.next_external,
            at: now,
            principal: principal.to_string(),
            action,
        };
        self.next_external += 1;
        self.apply_external(ev.clone())?;
        Ok(ev)
    }

    fn check_new_faults(&self, specs: &[FaultSpec]) -> Result<(), WorldError> {
        let mut all: Vec<FaultSpec> = self.faults.specs().to_vec();
        all.extend(specs.iter().cloned());
        let mut errs: Vec<String> = validate_specs(&all, self.scenario.topology.f, self.scenario.exceeds_fault_bound)
            .into_iter()
            .map(|e| e.to_string())
            .collect();
        let replicas: BTreeSet<ReplicaId> = self.replicas.keys().copied().collect();
        for s in specs {
            errs.extend(check_spec_refs(s, &replicas).into_iter().map(|e| e.to_string()));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(WorldError::InvalidExternal(errs.join("; ")))
        }
    }

    fn apply_external(&mut self, ev: ExternalEvent) -> Result<(), WorldError> {
        let now = self.now();
        let principal = ev.principal.clone();
        self.publish(&principal, Topic::RangeExternal, Body::External(ev.clone()))?;
        self.audit("harness", AuditEvent::ExternalApplied { seq: ev.seq })?;
        match ev.action {
            ExternalAction::InjectFault { spec } => {
                let window = spec.window.shifted(now);
                self.add_fault(FaultSpec { window, ..spec });
            }
            ExternalAction::Confirm {
                advisory,
                approve,
                rationale,
            } => {
                let c = Confirmation {
                    approve,
                    operator: principal.clone(),
                    at: now,
                    rationale,
                };
                match self.manager.book.confirm(advisory, c) {
                    Ok(d) => {
                        self.audit(
                            "manager",
                            AuditEvent::AdvisoryConfirmed {
                                advisory,
                                approve,
                                operator: principal,
                            },
                        )?;
                        if d.approved() {
                            self.execute_decision(&d)?;
                        }
                    }
                    Err(e) => self.warn("advisory", format!("confirmation of {advisory} ignored: {e}"))?,
                }
            }
            ExternalAction::Stop => self.stopped = true,
            ExternalAction::Branch { delta, faults, seed } => {
                if let Some(t) = delta.timeout {
                    for rep in self.replicas.values_mut() {
                        rep.set_timeout(t);
                    }
                    self.manager.timeout = t;
                }
                if let Some(w) = delta.watchdog_window {
                    self.plc.watchdog_window = w;
                    self.manager.watchdog_override = Some(w);
                }
                if let Some(d) = delta.ot_base_delay {
                    self.set_lane_delay(OT_LANE, d)?;
                }
                if let Some(d) = delta.consensus_base_delay {
                    self.set_lane_delay(CONSENSUS_LANE, d)?;
                }
                if let Some(old) = delta.replace {
                    if self.manager.spares.is_empty() {
                        self.warn("branch", format!("no spare to replace {old}"))?;
                    } else {
                        let new = self.manager.spares.remove(0);
                        self.issue_all(vec![
                            Command::Join { replica: new },
                            Command::Replace {
                                old,
                                new,
                                advisory: None,
                            },
                        ])?;
                    }
                }
                if let Some(s) = seed {
                    self.rngs.reseed(s);
                }
                for spec in faults {
                    let window = spec.window.shifted(now);
                    self.add_fault(FaultSpec { window, ..spec });
                }
            }
        }
        self.flush_trace()
    }

    // ---- twin jobs ----

    fn run_job(&mut self, job: TwinJob) -> Result<(), WorldError> {
        let Some(mut twin) = self.twin.take() else {
            return Ok(());
        };
        let now = self.now();
        let outcome = self.job_result(&mut twin, &job, now);
        self.twin = Some(twin);
        match outcome {
            Ok(Some((snapshot, result))) => {
                let offset = self.publish("twin", Topic::TwinResults, Body::TwinResult(result.clone()))?;
                let source = format!("{}:{}@{offset}", &snapshot[..12.min(snapshot.len())], Topic::TwinResults);
                let evidence = vec![EvidenceRef {
                    topic: Topic::TwinResults,
                    offset,
                }];
                let live = LiveSettings {
                    timeout: self.manager.timeout,
                };
                if let Some(adv) = emit_advisory(self.next_advisory, source, &result, &live, evidence, &self.broker, now)? {
                    self.next_advisory += 1;
                    self.publish("twin", Topic::TwinAdvisory, Body::Advisory(adv))?;
                }
            }
            Ok(None) => {}
            Err(e) => {
                let offset = self.broker.head(Topic::TwinResults);
                self.siem(Severity::Warning, "twin", format!("twin job at {now} failed: {e}"), Topic::TwinResults, offset)?;
            }
        }
        Ok(())
    }

    fn job_result(&self, twin: &mut Twin, job: &TwinJob, now: SimTime) -> Result<Option<(String, TwinResult)>, TwinError> {
        twin.catch_up(&self.broker)?;
        let snap = twin.snapshot(now);
        let result = match &job.kind {
            JobKind::WhatIf { delta, faults, horizon } => Some(TwinResult::WhatIf(twin.what_if(
                &snap.id,
                delta.clone(),
                faults.clone(),
                *horizon,
                None,
            )?)),
            JobKind::Sweep {
                axes,
                faults,
                horizon,
                budget,
            } => {
                let budget = budget.unwrap_or(self.scenario.twin.max_cells);
                Some(TwinResult::Sweep(twin.sweep(&snap.id, axes, faults, *horizon, budget)?))
            }
            JobKind::Detect => Some(twin.detect(self.scenario.twin.calibration, now)?),
            JobKind::CheckState => state_liars(twin.state(), self.scenario.topology.f),
        };
        Ok(result.map(|r| (snap.id, r)))
    }
}
