//! Sessions and the plan, approve, execute workflow.
//!
//! Sessions share one fleet, but only one plan flies at a time. Planning
//! never dispatches anything: a plan only reaches the drones through
//! [`Gateway::approve`].

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{broadcast, OwnedMutexGuard};
use tokio::task::JoinHandle;

use llmfleet::dsl::{compile, Plan, Statement};
use llmfleet::exec::{
    AbortHandle, EventLog, ExecError, Execution, ExecutionEvent, ExecutionHandle, ExecutionPolicy, ExecutionReport, Outcome,
};
use llmfleet::link::{DroneStatus, Fleet};
use llmfleet::llm::{plan_with_repair, ChatBackend, PlanningFailure, PlanningSettings, REPAIR_PREFIX};
use llmfleet::motion::DroneId;
use llmfleet::prompt::{ChatMessage, PersonaConfig, PromptBundle, PromptTemplates, Role};

use crate::transcript::{RecordKind, Transcript};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no session `{0}`")]
    UnknownSession(String),
    #[error("session has a running execution")]
    BusySession,
    #[error("another session's plan is flying")]
    FleetBusy,
    #[error("no pending plan")]
    NoPendingPlan,
    #[error("drones not ready: {0:?}")]
    FleetNotReady(Vec<DroneId>),
    #[error("no running execution")]
    NoExecution,
    #[error("task text is empty")]
    EmptyTask,
    #[error(transparent)]
    Planning(#[from] PlanningFailure),
    #[error(transparent)]
    Exec(ExecError),
}

/// One row of the plan preview table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionRow {
    pub drone: DroneId,
    pub action: String,
    /// Index of the barrier-delimited segment the action belongs to.
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanPreview {
    pub plan_text: String,
    pub actions: Vec<ActionRow>,
    pub barriers: usize,
    pub repairs_used: u32,
}

impl PlanPreview {
    pub fn from_plan(plan: &Plan, repairs_used: u32) -> Self {
        let mut segment = 0;
        let mut actions = Vec::new();
        for stmt in plan.statements() {
            match stmt {
                Statement::Barrier => segment += 1,
                Statement::Action(a) => actions.push(ActionRow { drone: a.drone, action: a.to_string(), segment }),
            }
        }
        PlanPreview { plan_text: plan.to_source(), actions, barriers: segment, repairs_used }
    }

    /// Plain-text rendering for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut segment = 0;
        for row in &self.actions {
            if row.segment != segment {
                segment = row.segment;
                out.push_str("  ---- all drones synchronize ----\n");
            }
            out.push_str(&format!("  drone {:<3} {}\n", row.drone.to_string(), row.action));
        }
        out
    }
}

/// Frames published on a session's subscription channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Event { execution_id: String, event: ExecutionEvent },
    Outcome { execution_id: String, outcome: Outcome, acks: BTreeMap<DroneId, usize>, cancelled: usize },
    Telemetry { drones: Vec<DroneStatus> },
}

struct Running {
    id: String,
    abort: AbortHandle,
    task: Option<JoinHandle<ExecutionReport>>,
}

impl Running {
    fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.is_finished())
    }
}

struct SessionState {
    bundle: PromptBundle,
    pending_plan: Option<Plan>,
}

struct SessionSlot {
    id: String,
    created_at: DateTime<Utc>,
    state: tokio::sync::Mutex<SessionState>,
    execution: Mutex<Option<Running>>,
    frames: broadcast::Sender<Frame>,
}

impl SessionSlot {
    fn is_running(&self) -> bool {
        self.execution.lock().unwrap().as_ref().is_some_and(Running::is_running)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionInfo {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub pending_plan: Option<String>,
    pub running: bool,
    pub history_len: usize,
}

/// Planning and execution knobs for a gateway.
#[derive(Clone)]
pub struct GatewayOptions {
    pub planning: PlanningSettings,
    pub templates: PromptTemplates,
    pub persona: PersonaConfig,
    pub policy: ExecutionPolicy,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            planning: PlanningSettings::default(),
            templates: PromptTemplates::default(),
            persona: PersonaConfig::default(),
            policy: ExecutionPolicy::default(),
        }
    }
}

struct Inner {
    fleet: Fleet,
    backend: Arc<dyn ChatBackend>,
    options: GatewayOptions,
    transcript: Transcript,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    flight: Arc<tokio::sync::Mutex<()>>,
}

/// Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    pub fn new(fleet: Fleet, backend: Arc<dyn ChatBackend>, options: GatewayOptions, transcript: Transcript) -> Self {
        Gateway {
            inner: Arc::new(Inner {
                fleet,
                backend,
                options,
                transcript,
                sessions: Mutex::new(HashMap::new()),
                flight: Arc::new(tokio::sync::Mutex::new(())),
            }),
        }
    }

    pub fn fleet(&self) -> &Fleet {
        &self.inner.fleet
    }

    pub fn transcript(&self) -> &Transcript {
        &self.inner.transcript
    }

    pub fn create_session(&self) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let bundle = PromptBundle::new(self.inner.options.templates.clone(), &self.inner.options.persona);
        let slot = SessionSlot {
            id: id.clone(),
            created_at: Utc::now(),
            state: tokio::sync::Mutex::new(SessionState { bundle, pending_plan: None }),
            execution: Mutex::new(None),
            frames: broadcast::channel(1024).0,
        };
        self.inner.sessions.lock().unwrap().insert(id.clone(), Arc::new(slot));
        id
    }

    fn slot(&self, session: &str) -> Result<Arc<SessionSlot>, GatewayError> {
        self.inner
            .sessions
            .lock()
            .unwrap()
            .get(session)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownSession(session.to_string()))
    }

    pub async fn session_info(&self, session: &str) -> Result<SessionInfo, GatewayError> {
        let slot = self.slot(session)?;
        let state = slot.state.lock().await;
        Ok(SessionInfo {
            id: slot.id.clone(),
            created_at: slot.created_at,
            pending_plan: state.pending_plan.as_ref().map(Plan::to_source),
            running: slot.is_running(),
            history_len: state.bundle.history().len(),
        })
    }

    /// Conversation history of a session, excluding the system prompt.
    pub async fn history(&self, session: &str) -> Result<Vec<ChatMessage>, GatewayError> {
        Ok(self.slot(session)?.state.lock().await.bundle.history().to_vec())
    }

    /// Subscribes to a session's event, outcome and telemetry frames.
    pub fn subscribe(&self, session: &str) -> Result<broadcast::Receiver<Frame>, GatewayError> {
        Ok(self.slot(session)?.frames.subscribe())
    }

    /// Publishes a telemetry frame to a session's subscribers.
    pub fn publish_telemetry(&self, session: &str) -> Result<(), GatewayError> {
        let _ = self.slot(session)?.frames.send(Frame::Telemetry { drones: self.fleet_status() });
        Ok(())
    }

    pub async fn submit_task(&self, session: &str, task: &str) -> Result<PlanPreview, GatewayError> {
        let task = task.trim();
        if task.is_empty() {
            return Err(GatewayError::EmptyTask);
        }
        let slot = self.slot(session)?;
        let mut state = slot.state.lock().await;
        if slot.is_running() {
            return Err(GatewayError::BusySession);
        }
        let transcript = &self.inner.transcript;
        transcript.record(session, RecordKind::Task, task);
        state.pending_plan = None;
        state.bundle.set_task(task);
        let history_before = state.bundle.history().len();
        let result = plan_with_repair(
            &mut state.bundle,
            self.inner.fleet.config(),
            self.inner.backend.as_ref(),
            &self.inner.options.planning,
        )
        .await;

        let replies = match &result {
            Ok(s) => &s.replies,
            Err(f) => &f.replies,
        };
        let mut replies = replies.iter();
        // Replay the committed turn so replies and repair feedback land in
        // the transcript in conversation order.
        for msg in state.bundle.history().iter().skip(history_before) {
            match msg.role {
                Role::Assistant => {
                    if let Some(reply) = replies.next() {
                        transcript.record(session, RecordKind::LlmReply, reply.as_str());
                    }
                }
                Role::User if msg.content.starts_with(REPAIR_PREFIX) => {
                    transcript.record(session, RecordKind::ValidationErrors, msg.content.as_str());
                }
                _ => {}
            }
        }
        for reply in replies {
            transcript.record(session, RecordKind::LlmReply, reply.as_str());
        }

        match result {
            Ok(success) => {
                transcript.record(session, RecordKind::Plan, success.plan.to_source());
                let preview = PlanPreview::from_plan(&success.plan, success.repairs_used);
                state.pending_plan = Some(success.plan);
                Ok(preview)
            }
            Err(failure) => {
                let payload = serde_json::json!({ "stage": failure.stage, "errors": failure.details });
                transcript.record(session, RecordKind::ValidationErrors, payload.to_string());
                Err(failure.into())
            }
        }
    }

    /// Starts flying the pending plan. Returns the execution id.
    pub async fn approve(&self, session: &str) -> Result<String, GatewayError> {
        let slot = self.slot(session)?;
        let mut state = slot.state.lock().await;
        if slot.is_running() {
            return Err(GatewayError::BusySession);
        }
        let plan = state.pending_plan.as_ref().ok_or(GatewayError::NoPendingPlan)?;
        let flight = self.inner.flight.clone().try_lock_owned().map_err(|_| GatewayError::FleetBusy)?;
        let offline = self.inner.fleet.not_ready(plan.referenced_drones().iter().copied());
        if !offline.is_empty() {
            return Err(GatewayError::FleetNotReady(offline));
        }
        let execution = Execution::new(compile(plan), self.inner.fleet.sessions(), self.inner.options.policy)
            .map_err(|e| match e {
                ExecError::NotReady(ids) => GatewayError::FleetNotReady(ids),
                other => GatewayError::Exec(other),
            })?;
        let plan = state.pending_plan.take().expect("checked above");
        let execution_id = uuid::Uuid::new_v4().simple().to_string();
        self.inner.transcript.record(session, RecordKind::Approval, format!("{execution_id}\n{}", plan.to_source()));

        let events = execution.subscribe();
        let log = execution.event_log();
        let abort = execution.abort_handle();
        let handle = execution.start();
        let stream = EventStream { events, log, seen: 0 };
        let task = tokio::spawn(forward(self.clone(), slot.clone(), execution_id.clone(), handle, stream, flight));
        *slot.execution.lock().unwrap() = Some(Running { id: execution_id.clone(), abort, task: Some(task) });
        Ok(execution_id)
    }

    /// Discards the pending plan. Feedback, if any, joins the conversation
    /// so the next task refines the plan instead of starting over.
    pub async fn reject(&self, session: &str, feedback: Option<&str>) -> Result<(), GatewayError> {
        let slot = self.slot(session)?;
        let mut state = slot.state.lock().await;
        let plan = state.pending_plan.take().ok_or(GatewayError::NoPendingPlan)?;
        let feedback = feedback.map(str::trim).filter(|f| !f.is_empty());
        if let Some(text) = feedback {
            let message = ChatMessage::new(Role::User, text).expect("non-empty");
            state.bundle.push_history(message).expect("user message");
        }
        let payload = match feedback {
            Some(text) => format!("{}\nfeedback: {text}", plan.to_source()),
            None => plan.to_source(),
        };
        self.inner.transcript.record(session, RecordKind::Rejection, payload);
        Ok(())
    }

    /// Requests an abort of the session's running execution.
    pub fn abort(&self, session: &str) -> Result<String, GatewayError> {
        let slot = self.slot(session)?;
        let execution = slot.execution.lock().unwrap();
        match execution.as_ref() {
            Some(running) if running.is_running() => {
                running.abort.abort("operator abort");
                Ok(running.id.clone())
            }
            _ => Err(GatewayError::NoExecution),
        }
    }

    /// Waits for the session's current or most recent execution to finish.
    pub async fn wait_execution(&self, session: &str) -> Result<ExecutionReport, GatewayError> {
        let slot = self.slot(session)?;
        let task = slot.execution.lock().unwrap().as_mut().and_then(|r| r.task.take()).ok_or(GatewayError::NoExecution)?;
        Ok(task.await.expect("forwarder panicked"))
    }

    pub fn fleet_status(&self) -> Vec<DroneStatus> {
        self.inner.fleet.status()
    }

    pub async fn reconnect(&self) -> Vec<DroneStatus> {
        self.inner.fleet.reconnect().await;
        self.fleet_status()
    }
}

/// Broadcast receiver that refills lag gaps from the event log, so every
/// event comes out exactly once and in order.
struct EventStream {
    events: broadcast::Receiver<ExecutionEvent>,
    log: EventLog,
    seen: usize,
}

impl EventStream {
    async fn next(&mut self) -> Vec<ExecutionEvent> {
        let got = self.events.recv().await;
        self.take(got.map_err(|e| match e {
            broadcast::error::RecvError::Lagged(n) => Some(n),
            broadcast::error::RecvError::Closed => None,
        }))
    }

    /// Everything left once the execution is over.
    fn rest(&mut self) -> Vec<ExecutionEvent> {
        let rest = self.log.range(self.seen, usize::MAX);
        self.seen += rest.len();
        rest
    }

    fn take(&mut self, got: Result<ExecutionEvent, Option<u64>>) -> Vec<ExecutionEvent> {
        match got {
            Ok(e) => {
                self.seen += 1;
                vec![e]
            }
            Err(Some(skipped)) => {
                let missed = self.log.range(self.seen, skipped as usize);
                self.seen += missed.len();
                missed
            }
            Err(None) => Vec::new(),
        }
    }
}

/// Mirrors execution events to subscribers and the transcript, then holds
/// the flight lock until the run is over.
async fn forward(
    gateway: Gateway,
    slot: Arc<SessionSlot>,
    execution_id: String,
    handle: ExecutionHandle,
    mut stream: EventStream,
    flight: OwnedMutexGuard<()>,
) -> ExecutionReport {
    let transcript = &gateway.inner.transcript;
    let publish = |event: ExecutionEvent| {
        let payload = serde_json::to_string(&event).expect("event serializes");
        transcript.record(&slot.id, RecordKind::Event, payload);
        let _ = slot.frames.send(Frame::Event { execution_id: execution_id.clone(), event });
    };
    let wait = handle.wait();
    tokio::pin!(wait);
    let report = loop {
        tokio::select! {
            biased;
            events = stream.next() => events.into_iter().for_each(&publish),
            report = &mut wait => break report,
        }
    };
    stream.rest().into_iter().for_each(&publish);
    transcript.record(&slot.id, RecordKind::Outcome, serde_json::to_string(&report.outcome).expect("outcome serializes"));
    let _ = slot.frames.send(Frame::Outcome {
        execution_id,
        outcome: report.outcome.clone(),
        acks: report.acks.clone(),
        cancelled: report.cancelled,
    });
    drop(flight);
    report
}
