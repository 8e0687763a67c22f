//! Live runs: each world lives on its own thread and advances in slices of
//! simulated time. Requests reach it through a command queue and are
//! applied between slices, so every interaction lands at a definite
//! simulated instant and is logged on `range.external`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use byztwin_core::{
    build_report, Broker, ExternalAction, ExternalEvent, ManagerDecision, RunReport, Scenario, SimTime, Twin,
    TwinError, World, WorldError, WorldOptions,
};
use serde::Serialize;
use tokio::sync::oneshot;

use crate::rundir::{self, RunDirError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} has finished")]
    Finished(String),
    #[error("run thread is gone")]
    Gone,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    RunDir(#[from] RunDirError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Paused,
    Running,
    Finished,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunStatus {
    pub id: String,
    pub name: String,
    pub seed: u64,
    pub state: RunState,
    pub now: SimTime,
    pub end: SimTime,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_hash: Option<String>,
}

/// How to drive a new run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub seed: Option<u64>,
    pub auto_confirm: Option<bool>,
    /// Simulated time per slice.
    pub slice: SimTime,
    /// Simulated seconds per wall second; `None` runs flat out.
    pub pace: Option<f64>,
    pub paused: bool,
    /// Persist the store and run files here.
    pub dir: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(scenario: Scenario) -> Self {
        RunSpec {
            scenario,
            seed: None,
            auto_confirm: None,
            slice: SimTime::from_millis(10),
            pace: None,
            paused: false,
            dir: None,
        }
    }
}

/// A twin frozen at a snapshot, ready for what-if work off the run thread.
#[derive(Clone)]
pub struct Frozen {
    pub twin: Twin,
    pub snapshot: String,
    pub at: SimTime,
}

enum Cmd {
    Submit {
        principal: String,
        action: ExternalAction,
        reply: oneshot::Sender<Result<ExternalEvent, RunError>>,
    },
    Freeze {
        reply: oneshot::Sender<Result<Frozen, RunError>>,
    },
    Decisions {
        reply: oneshot::Sender<Vec<ManagerDecision>>,
    },
    Pause,
    Resume { until: Option<SimTime> },
    Shutdown,
}

pub struct RunHandle {
    pub id: String,
    pub scenario: Arc<Scenario>,
    pub broker: Arc<Broker>,
    status: Arc<Mutex<RunStatus>>,
    report: Arc<Mutex<Option<RunReport>>>,
    tx: Mutex<mpsc::Sender<Cmd>>,
    thread: Mutex<Option<thread::JoinHandle<()>>>,
}

impl RunHandle {
    pub fn status(&self) -> RunStatus {
        self.status.lock().expect("status lock").clone()
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.status().state, RunState::Finished | RunState::Failed)
    }

    /// The final report once finished, otherwise a report over the run so
    /// far.
    pub fn report(&self) -> Result<RunReport, RunError> {
        if let Some(r) = self.report.lock().expect("report lock").clone() {
            return Ok(r);
        }
        let now = self.status().now;
        build_report(&self.broker, SimTime::ZERO, now).map_err(|e| RunError::World(e.into()))
    }

    fn send(&self, cmd: Cmd) -> Result<(), RunError> {
        self.tx.lock().expect("tx lock").send(cmd).map_err(|_| RunError::Gone)
    }

    pub async fn submit(&self, principal: &str, action: ExternalAction) -> Result<ExternalEvent, RunError> {
        let (reply, rx) = oneshot::channel();
        self.send(Cmd::Submit {
            principal: principal.to_string(),
            action,
            reply,
        })?;
        rx.await.map_err(|_| RunError::Gone)?
    }

    pub async fn freeze(&self) -> Result<Frozen, RunError> {
        let (reply, rx) = oneshot::channel();
        self.send(Cmd::Freeze { reply })?;
        rx.await.map_err(|_| RunError::Gone)?
    }

    pub async fn decisions(&self) -> Result<Vec<ManagerDecision>, RunError> {
        let (reply, rx) = oneshot::channel();
        self.send(Cmd::Decisions { reply })?;
        rx.await.map_err(|_| RunError::Gone)
    }

    pub fn pause(&self) -> Result<(), RunError> {
        self.send(Cmd::Pause)
    }

    /// Resume, pausing again once simulated time reaches `until`.
    pub fn resume(&self, until: Option<SimTime>) -> Result<(), RunError> {
        self.send(Cmd::Resume { until })
    }

    fn shutdown(&self) {
        let _ = self.send(Cmd::Shutdown);
        if let Some(t) = self.thread.lock().expect("thread lock").take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Default)]
pub struct RunManager {
    next: AtomicU64,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    /// Where runs persist, one subdirectory per run.
    root: Option<PathBuf>,
}

impl RunManager {
    pub fn new(root: Option<PathBuf>) -> Self {
        RunManager {
            root,
            ..Default::default()
        }
    }

    pub fn list(&self) -> Vec<RunStatus> {
        self.runs.lock().expect("runs lock").values().map(|h| h.status()).collect()
    }

    pub fn get(&self, id: &str) -> Result<Arc<RunHandle>, RunError> {
        self.runs
            .lock()
            .expect("runs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| RunError::UnknownRun(id.to_string()))
    }

    pub fn remove(&self, id: &str) -> Result<(), RunError> {
        let h = self
            .runs
            .lock()
            .expect("runs lock")
            .remove(id)
            .ok_or_else(|| RunError::UnknownRun(id.to_string()))?;
        h.shutdown();
        Ok(())
    }

    pub fn start(&self, mut spec: RunSpec) -> Result<Arc<RunHandle>, RunError> {
        let id = format!("run-{}", self.next.fetch_add(1, Ordering::Relaxed) + 1);
        if spec.dir.is_none() {
            spec.dir = self.root.as_ref().map(|r| r.join(&id));
        }
        let handle = spawn(id.clone(), spec)?;
        self.runs.lock().expect("runs lock").insert(id, handle.clone());
        Ok(handle)
    }
}

/// Build the world on the caller's thread, so configuration errors surface
/// immediately, then hand it to a run thread.
pub fn spawn(id: String, spec: RunSpec) -> Result<Arc<RunHandle>, RunError> {
    let broker = match &spec.dir {
        Some(d) => Some(Arc::new(rundir::create_store(d)?)),
        None => None,
    };
    let opts = WorldOptions {
        seed: spec.seed,
        auto_confirm: spec.auto_confirm,
        broker,
        ..Default::default()
    };
    let world = World::new(spec.scenario.clone(), opts)?;
    let status = Arc::new(Mutex::new(RunStatus {
        id: id.clone(),
        name: spec.scenario.name.clone(),
        seed: world.seed(),
        state: if spec.paused { RunState::Paused } else { RunState::Running },
        now: world.now(),
        end: world.end(),
        error: None,
        report_hash: None,
    }));
    let report = Arc::new(Mutex::new(None));
    let (tx, rx) = mpsc::channel();
    let scenario = Arc::new(spec.scenario.clone());
    let broker = world.broker().clone();
    let runner = Runner {
        twin: Twin::new(scenario.clone(), world.seed(), broker_auto_confirm(&world)),
        world,
        spec,
        status: status.clone(),
        report: report.clone(),
        last: None,
        pause_at: None,
    };
    let thread = thread::Builder::new()
        .name(id.clone())
        .spawn(move || runner.run(rx))
        .expect("spawn run thread");
    Ok(Arc::new(RunHandle {
        id,
        scenario,
        broker,
        status,
        report,
        tx: Mutex::new(tx),
        thread: Mutex::new(Some(thread)),
    }))
}

/// The effective auto-confirm setting, as recorded at run start.
fn broker_auto_confirm(world: &World) -> bool {
    byztwin_core::harness::run_params(world.broker())
        .map(|p| p.auto_confirm)
        .unwrap_or(world.scenario().auto_confirm)
}

struct Runner {
    world: World,
    twin: Twin,
    spec: RunSpec,
    status: Arc<Mutex<RunStatus>>,
    report: Arc<Mutex<Option<RunReport>>>,
    /// Mirror as of the last instant before completion was recorded.
    last: Option<Frozen>,
    pause_at: Option<SimTime>,
}

impl Runner {
    fn run(mut self, rx: mpsc::Receiver<Cmd>) {
        let mut paused = self.spec.paused;
        loop {
            let done = self.state() != RunState::Running && self.state() != RunState::Paused;
            if !done && self.world.is_done() {
                self.complete();
                continue;
            }
            let cmd = if done || paused {
                match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                }
            } else {
                match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return,
                }
            };
            match cmd {
                Some(Cmd::Shutdown) => return,
                Some(Cmd::Pause) if !done => {
                    paused = true;
                    self.set_state(RunState::Paused);
                }
                Some(Cmd::Resume { until }) if !done => {
                    self.pause_at = until;
                    paused = until.is_some_and(|t| t <= self.world.now());
                    self.set_state(if paused { RunState::Paused } else { RunState::Running });
                }
                Some(Cmd::Pause | Cmd::Resume { .. }) => {}
                Some(Cmd::Submit {
                    principal,
                    action,
                    reply,
                }) => {
                    let r = if done {
                        Err(RunError::Finished(self.id()))
                    } else {
                        self.world.submit(&principal, action).map_err(RunError::from)
                    };
                    let _ = reply.send(r);
                }
                Some(Cmd::Freeze { reply }) => {
                    let _ = reply.send(self.freeze(done));
                }
                Some(Cmd::Decisions { reply }) => {
                    let _ = reply.send(self.world.decisions().cloned().collect());
                }
                None => {
                    self.step();
                    if self.pause_at.is_some_and(|t| self.world.now() >= t) && !self.world.is_done() {
                        self.pause_at = None;
                        paused = true;
                        self.set_state(RunState::Paused);
                    }
                }
            }
        }
    }

    fn id(&self) -> String {
        self.status.lock().expect("status lock").id.clone()
    }

    fn state(&self) -> RunState {
        self.status.lock().expect("status lock").state
    }

    fn set_state(&self, s: RunState) {
        self.status.lock().expect("status lock").state = s;
    }

    fn step(&mut self) {
        let started = Instant::now();
        let mut target = self.world.now() + self.spec.slice;
        if let Some(t) = self.pause_at {
            target = target.min(t);
        }
        if let Err(e) = self.world.run_until(target) {
            self.fail(e.to_string());
            return;
        }
        self.status.lock().expect("status lock").now = self.world.now();
        if let Some(pace) = self.spec.pace.filter(|p| *p > 0.0) {
            let wall = Duration::from_secs_f64(self.spec.slice.as_secs_f64() / pace);
            if let Some(rest) = wall.checked_sub(started.elapsed()) {
                thread::sleep(rest);
            }
        }
    }

    fn freeze(&mut self, done: bool) -> Result<Frozen, RunError> {
        if done {
            return self.last.clone().ok_or_else(|| RunError::Finished(self.id()));
        }
        self.twin.catch_up(self.world.broker())?;
        let mut twin = self.twin.clone();
        let at = self.world.now();
        let snap = twin.snapshot(at);
        Ok(Frozen {
            twin,
            snapshot: snap.id,
            at,
        })
    }

    fn complete(&mut self) {
        self.last = self.freeze(false).ok();
        let report = match self.world.finish() {
            Ok(r) => r,
            Err(e) => return self.fail(e.to_string()),
        };
        if let Some(dir) = &self.spec.dir {
            if let Err(e) = rundir::write(dir, &self.spec.scenario, self.world.broker(), &report) {
                tracing::warn!(error = %e, "could not write run directory");
            }
        }
        {
            let mut s = self.status.lock().expect("status lock");
            s.now = self.world.now();
            s.state = RunState::Finished;
            s.report_hash = Some(report.hash());
        }
        *self.report.lock().expect("report lock") = Some(report);
    }

    fn fail(&mut self, error: String) {
        tracing::error!(%error, "run failed");
        let mut s = self.status.lock().expect("status lock");
        s.state = RunState::Failed;
        s.error = Some(error);
    }
}
