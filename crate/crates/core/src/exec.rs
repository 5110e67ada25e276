//! Runs a compiled [`Schedule`] against live drone sessions.
//!
//! One task per drone advances that drone's queue, waiting for each ack
//! before the next dispatch. Barriers release only after every drone has
//! reached them, counted by arrivals rather than by time. Any nack or
//! timeout aborts the whole run, and every drone believed airborne gets a
//! single `land`.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Serialize, Serializer};
use thiserror::Error;
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;

use crate::dsl::Schedule;
use crate::link::{DroneSession, SessionStatus};
use crate::motion::{DroneAction, DroneId, Motion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    PlanStarted,
    Dispatched,
    Acked,
    BarrierReached,
    BarrierReleased,
    HoverStarted,
    Failed,
    AbortIssued,
    PlanCompleted,
}

/// One entry of the execution event stream. A hover has no `Dispatched`
/// event: it starts with `HoverStarted` and ends with `Acked`, or with
/// `Failed` when an abort cuts it short.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionEvent {
    pub kind: EventKind,
    pub drone: Option<DroneId>,
    #[serde(serialize_with = "action_as_dsl")]
    pub action: Option<DroneAction>,
    /// Time since the execution started, strictly increasing along the
    /// stream. Serialized in microseconds.
    #[serde(serialize_with = "micros")]
    pub timestamp: Duration,
    pub detail: String,
}

fn action_as_dsl<S: Serializer>(action: &Option<DroneAction>, s: S) -> Result<S::Ok, S::Error> {
    match action {
        Some(a) => s.serialize_some(&a.to_string()),
        None => s.serialize_none(),
    }
}

fn micros<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_micros() as u64)
}

impl ExecutionEvent {
    /// True for the `land` sent while aborting.
    pub fn is_safety_land(&self) -> bool {
        self.kind == EventKind::Dispatched && self.detail == SAFETY_LAND
    }
}

const SAFETY_LAND: &str = "safety land";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionReport {
    pub events: Vec<ExecutionEvent>,
    pub outcome: Outcome,
    /// Scheduled actions acked per drone; safety lands are not counted.
    pub acks: BTreeMap<DroneId, usize>,
    /// Scheduled actions never started because of an abort.
    pub cancelled: usize,
}

impl ExecutionReport {
    pub fn is_completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &ExecutionEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutionPolicy {
    /// Multiplier applied to hover waits, matching the simulator's
    /// time scale in tests. 1.0 for real flights.
    pub time_scale: f64,
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        ExecutionPolicy { time_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("no session for drone {0}")]
    MissingSession(DroneId),
    #[error("drones not ready: {0:?}")]
    NotReady(Vec<DroneId>),
    #[error("time scale must be finite and non-negative")]
    TimeScale,
}

// ---------------------------------------------------------------------------
// Event sink and abort state

#[derive(Debug)]
struct SinkState {
    events: Vec<ExecutionEvent>,
    last: Option<Duration>,
    abort_reason: Option<String>,
    finished: bool,
}

/// Serializes event emission. Timestamps are taken under the lock, so the
/// stream order and the timestamp order agree.
#[derive(Debug)]
struct Sink {
    origin: Instant,
    state: Mutex<SinkState>,
    tx: broadcast::Sender<ExecutionEvent>,
    abort_tx: watch::Sender<bool>,
}

impl Sink {
    fn new() -> Self {
        let (tx, _) = broadcast::channel(1024);
        let (abort_tx, _) = watch::channel(false);
        Sink {
            origin: Instant::now(),
            state: Mutex::new(SinkState { events: Vec::new(), last: None, abort_reason: None, finished: false }),
            tx,
            abort_tx,
        }
    }

    fn push(&self, state: &mut SinkState, kind: EventKind, drone: Option<DroneId>, action: Option<DroneAction>, detail: String) {
        let mut timestamp = self.origin.elapsed();
        if let Some(last) = state.last {
            if timestamp <= last {
                timestamp = last + Duration::from_nanos(1);
            }
        }
        state.last = Some(timestamp);
        let event = ExecutionEvent { kind, drone, action, timestamp, detail };
        state.events.push(event.clone());
        let _ = self.tx.send(event);
    }

    fn emit(&self, kind: EventKind, drone: Option<DroneId>, action: Option<DroneAction>, detail: impl Into<String>) {
        let mut state = self.state.lock().unwrap();
        self.push(&mut state, kind, drone, action, detail.into());
    }

    /// Emits the start of a scheduled action unless an abort is already
    /// pending, atomically with respect to [`trigger_abort`](Self::trigger_abort).
    fn emit_start(&self, action: DroneAction) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.abort_reason.is_some() {
            return false;
        }
        let kind = if action.motion.hover_duration().is_some() { EventKind::HoverStarted } else { EventKind::Dispatched };
        self.push(&mut state, kind, Some(action.drone), Some(action), String::new());
        true
    }

    /// First reason wins. No effect once the run has finished.
    fn trigger_abort(&self, reason: String) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.finished || state.abort_reason.is_some() {
            return false;
        }
        state.abort_reason = Some(reason);
        self.abort_tx.send_replace(true);
        true
    }

    /// Closes the window for aborts. Fails if one is already pending.
    fn mark_finished(&self) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.abort_reason.is_some() {
            return false;
        }
        state.finished = true;
        true
    }

    fn abort_reason(&self) -> Option<String> {
        self.state.lock().unwrap().abort_reason.clone()
    }

    async fn aborted(&self) {
        let mut rx = self.abort_tx.subscribe();
        let _ = rx.wait_for(|a| *a).await;
    }
}

/// Cloneable handle for requesting an abort.
#[derive(Debug, Clone)]
pub struct AbortHandle(Arc<Sink>);

impl AbortHandle {
    /// Returns false if the run already finished or was already aborted.
    pub fn abort(&self, reason: impl Into<String>) -> bool {
        self.0.trigger_abort(reason.into())
    }
}

/// Read access to an execution's recorded events, for subscribers that
/// fell behind the broadcast channel.
#[derive(Debug, Clone)]
pub struct EventLog(Arc<Sink>);

impl EventLog {
    pub fn len(&self) -> usize {
        self.0.state.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Events `from..from + count`, clamped to what has been recorded.
    pub fn range(&self, from: usize, count: usize) -> Vec<ExecutionEvent> {
        let state = self.0.state.lock().unwrap();
        state.events.iter().skip(from).take(count).cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Barrier coordination

#[derive(Debug)]
struct Rendezvous {
    drones: usize,
    arrivals: Mutex<Vec<usize>>,
    released: watch::Sender<usize>,
}

impl Rendezvous {
    /// `points` includes the final, silent rendezvous after the last barrier.
    fn new(drones: usize, points: usize) -> Self {
        Rendezvous { drones, arrivals: Mutex::new(vec![0; points]), released: watch::channel(0).0 }
    }

    fn arrive(&self, point: usize) -> bool {
        let mut arrivals = self.arrivals.lock().unwrap();
        arrivals[point] += 1;
        arrivals[point] == self.drones
    }

    fn release(&self, point: usize) {
        self.released.send_modify(|r| *r = (*r).max(point + 1));
    }

    async fn released(&self, point: usize) {
        let mut rx = self.released.subscribe();
        let _ = rx.wait_for(|r| *r > point).await;
    }
}

// ---------------------------------------------------------------------------
// Per-drone task

struct Shared {
    sink: Arc<Sink>,
    rendezvous: Rendezvous,
    barriers: usize,
    time_scale: f64,
}

struct Tally {
    drone: DroneId,
    acks: usize,
    cancelled: usize,
}

enum Step {
    Continue,
    Abort,
}

async fn run_drone(drone: DroneId, segments: Vec<Vec<DroneAction>>, session: Arc<DroneSession>, shared: Arc<Shared>) -> Tally {
    let total: usize = segments.iter().map(Vec::len).sum();
    let mut started = 0;
    let mut acks = 0;
    let mut airborne = false;
    let sink = &shared.sink;

    'run: for (k, segment) in segments.iter().enumerate() {
        for action in segment {
            if !sink.emit_start(*action) {
                break 'run;
            }
            started += 1;
            if let Some(wait) = action.motion.hover_duration() {
                let wait = wait.mul_f64(shared.time_scale);
                tokio::select! {
                    _ = tokio::time::sleep(wait) => {
                        sink.emit(EventKind::Acked, Some(drone), Some(*action), "hover done");
                        acks += 1;
                    }
                    _ = sink.aborted() => {
                        sink.emit(EventKind::Failed, Some(drone), Some(*action), "hover interrupted by abort");
                        break 'run;
                    }
                }
                continue;
            }
            match session.dispatch(action).await {
                Ok(ack) => {
                    sink.emit(EventKind::Acked, Some(drone), Some(*action), format!("{:?} in {:?}", ack.reply, ack.latency));
                    acks += 1;
                    match action.motion {
                        Motion::Takeoff => airborne = true,
                        Motion::Land => airborne = false,
                        _ => {}
                    }
                }
                Err(e) => {
                    // A takeoff whose reply was lost may still have lifted off.
                    if matches!(action.motion, Motion::Takeoff) && session.status() == SessionStatus::Disconnected {
                        airborne = true;
                    }
                    sink.emit(EventKind::Failed, Some(drone), Some(*action), e.to_string());
                    sink.trigger_abort(format!("drone {drone}: `{action}` failed: {e}"));
                    break 'run;
                }
            }
        }
        let is_barrier = k < shared.barriers;
        if matches!(rendezvous(drone, k, is_barrier, &shared).await, Step::Abort) {
            break 'run;
        }
    }

    if let Some(reason) = sink.abort_reason() {
        let plan = if airborne { "landing" } else { "on the ground" };
        sink.emit(EventKind::AbortIssued, Some(drone), None, format!("{reason}; {plan}"));
        if airborne {
            let land = DroneAction::new(drone, Motion::Land);
            sink.emit(EventKind::Dispatched, Some(drone), Some(land), SAFETY_LAND);
            match session.dispatch_safe_land().await {
                Ok(ack) => sink.emit(EventKind::Acked, Some(drone), Some(land), format!("{:?} in {:?}", ack.reply, ack.latency)),
                Err(e) => sink.emit(EventKind::Failed, Some(drone), Some(land), e.to_string()),
            }
        }
    }
    Tally { drone, acks, cancelled: total - started }
}

async fn rendezvous(drone: DroneId, point: usize, is_barrier: bool, shared: &Shared) -> Step {
    let sink = &shared.sink;
    if is_barrier {
        sink.emit(EventKind::BarrierReached, Some(drone), None, format!("barrier {}", point + 1));
    }
    if shared.rendezvous.arrive(point) {
        if is_barrier {
            sink.emit(EventKind::BarrierReleased, None, None, format!("barrier {}", point + 1));
        } else {
            // Last drone done: from here on an abort request has nothing
            // to cancel.
            sink.mark_finished();
        }
        shared.rendezvous.release(point);
    }
    tokio::select! {
        _ = shared.rendezvous.released(point) => {}
        _ = sink.aborted() => return Step::Abort,
    }
    if sink.abort_reason().is_some() {
        Step::Abort
    } else {
        Step::Continue
    }
}

// ---------------------------------------------------------------------------
// Public entry points

/// A prepared run. Subscribe or grab an abort handle before
/// [`start`](Self::start) to see every event.
pub struct Execution {
    schedule: Schedule,
    sessions: BTreeMap<DroneId, Arc<DroneSession>>,
    policy: ExecutionPolicy,
    sink: Arc<Sink>,
}

impl Execution {
    /// Checks that every scheduled drone has a Ready session.
    pub fn new(
        schedule: Schedule,
        sessions: &BTreeMap<DroneId, Arc<DroneSession>>,
        policy: ExecutionPolicy,
    ) -> Result<Self, ExecError> {
        if !policy.time_scale.is_finite() || policy.time_scale < 0.0 {
            return Err(ExecError::TimeScale);
        }
        let mut picked = BTreeMap::new();
        let mut not_ready = Vec::new();
        for drone in schedule.drones() {
            let session = sessions.get(&drone).ok_or(ExecError::MissingSession(drone))?;
            if session.status() != SessionStatus::Ready {
                not_ready.push(drone);
            }
            picked.insert(drone, session.clone());
        }
        if !not_ready.is_empty() {
            return Err(ExecError::NotReady(not_ready));
        }
        Ok(Execution { schedule, sessions: picked, policy, sink: Arc::new(Sink::new()) })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ExecutionEvent> {
        self.sink.tx.subscribe()
    }

    pub fn abort_handle(&self) -> AbortHandle {
        AbortHandle(self.sink.clone())
    }

    pub fn event_log(&self) -> EventLog {
        EventLog(self.sink.clone())
    }

    pub fn start(self) -> ExecutionHandle {
        let sink = self.sink.clone();
        let join = tokio::spawn(run(self));
        ExecutionHandle { sink, join }
    }
}

async fn run(exec: Execution) -> ExecutionReport {
    let Execution { schedule, sessions, policy, sink } = exec;
    let barriers = schedule.barrier_count();
    let drones: Vec<DroneId> = schedule.drones().collect();
    sink.emit(
        EventKind::PlanStarted,
        None,
        None,
        format!("{} action(s), {} drone(s), {} barrier(s)", schedule.total_actions(), drones.len(), barriers),
    );
    let shared = Arc::new(Shared {
        sink: sink.clone(),
        rendezvous: Rendezvous::new(drones.len(), barriers + 1),
        barriers,
        time_scale: policy.time_scale,
    });
    let tasks: Vec<_> = drones
        .iter()
        .map(|&d| {
            let segments = schedule.segments(d).into_iter().map(<[DroneAction]>::to_vec).collect();
            tokio::spawn(run_drone(d, segments, sessions[&d].clone(), shared.clone()))
        })
        .collect();

    let mut acks = BTreeMap::new();
    let mut cancelled = 0;
    for task in tasks {
        let tally = task.await.expect("drone task panicked");
        acks.insert(tally.drone, tally.acks);
        cancelled += tally.cancelled;
    }
    let outcome = match sink.abort_reason() {
        Some(reason) => Outcome::Aborted { reason },
        None => {
            sink.emit(EventKind::PlanCompleted, None, None, "all actions acked");
            Outcome::Completed
        }
    };
    let events = sink.state.lock().unwrap().events.clone();
    ExecutionReport { events, outcome, acks, cancelled }
}

/// A running execution.
pub struct ExecutionHandle {
    sink: Arc<Sink>,
    join: JoinHandle<ExecutionReport>,
}

impl ExecutionHandle {
    pub fn subscribe(&self) -> broadcast::Receiver<ExecutionEvent> {
        self.sink.tx.subscribe()
    }

    pub fn abort_handle(&self) -> AbortHandle {
        AbortHandle(self.sink.clone())
    }

    pub fn request_abort(&self, reason: impl Into<String>) -> bool {
        self.sink.trigger_abort(reason.into())
    }

    /// Events emitted so far.
    pub fn events(&self) -> Vec<ExecutionEvent> {
        self.sink.state.lock().unwrap().events.clone()
    }

    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }

    pub async fn wait(self) -> ExecutionReport {
        self.join.await.expect("execution task panicked")
    }

    /// Requests an abort and waits for the safety lands to resolve.
    pub async fn abort(self, reason: impl Into<String>) -> ExecutionReport {
        self.request_abort(reason);
        self.wait().await
    }
}

/// Validates, starts, and waits for a run.
pub async fn execute(
    schedule: Schedule,
    sessions: &BTreeMap<DroneId, Arc<DroneSession>>,
    policy: ExecutionPolicy,
) -> Result<ExecutionReport, ExecError> {
    Ok(Execution::new(schedule, sessions, policy)?.start().wait().await)
}
