use std::sync::Arc;
use std::time::Duration;

use llmfleet::exec::{EventKind, ExecutionPolicy, Outcome};
use llmfleet::link::{Fleet, FleetConfig, FleetEntry, SessionStatus, TelemetryHub};
use llmfleet::llm::{PlanningStage, Script, ScriptRule, ScriptedBackend};
use llmfleet::motion::DroneId;
use llmfleet::prompt::Role;
use llmfleet::sim::{spawn_fleet, FaultEntry, FaultKind, FaultScript, SimConfig, SimFleet};
use llmfleet_gateway::{Frame, Gateway, GatewayError, GatewayOptions, RecordKind, Transcript};

const SCALE: f64 = 0.01;

fn id(n: u32) -> DroneId {
    DroneId::new(n).unwrap()
}

fn fenced(code: &str) -> String {
    format!("Here is the plan:\n```\n{code}\n```")
}

fn script() -> Script {
    let rule = |when: &str, replies: &[&str]| ScriptRule {
        when: when.into(),
        replies: replies.iter().map(|r| fenced(r)).collect(),
    };
    Script {
        rules: vec![
            rule("take off drone 1 and land", &["takeoff(1)\nland(1)"]),
            rule("both drones", &["takeoff(1)\ntakeoff(2)\nland(1)\nland(2)"]),
            rule("drone 7", &["takeoff(7)"]),
            rule("long hover", &["takeoff(1)\nhover(1, 30)\nland(1)"]),
            rule("use drone 2 instead", &["takeoff(2)\nland(2)"]),
            rule("needs repair", &["takeoff(1)\nteleport(1)", "takeoff(1)\nland(1)"]),
        ],
        default: None,
    }
}

struct Rig {
    sim: SimFleet,
    gateway: Gateway,
}

async fn rig(drones: u32, faults: FaultScript) -> Rig {
    let hub = TelemetryHub::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let sim = spawn_fleet(SimConfig::loopback(drones, 0, SCALE).with_faults(faults).with_telemetry_sink(hub.local_addr()))
        .await
        .unwrap();
    let entries = sim.addresses().into_iter().map(|(n, address)| FleetEntry { id: id(n), address }).collect();
    let config = FleetConfig::new(entries).unwrap().with_timeout(Duration::from_millis(300));
    let fleet = Fleet::connect(config, Some(hub)).await.unwrap();
    let options = GatewayOptions { policy: ExecutionPolicy { time_scale: SCALE }, ..Default::default() };
    let gateway = Gateway::new(fleet, Arc::new(ScriptedBackend::new(script())), options, Transcript::in_memory());
    Rig { sim, gateway }
}

#[tokio::test]
async fn task_preview_approve_fly() {
    let Rig { sim, gateway } = rig(1, FaultScript::default()).await;
    let s = gateway.create_session();
    let preview = gateway.submit_task(&s, "Take off drone 1 and land").await.unwrap();
    assert_eq!(preview.plan_text, "takeoff(1)\nland(1)");
    assert_eq!(preview.actions.len(), 2);

    // Nothing flies before approval.
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(sim.received(1), vec!["command"]);

    let mut frames = gateway.subscribe(&s).unwrap();
    gateway.approve(&s).await.unwrap();
    let first = tokio::time::timeout(Duration::from_secs(1), async {
        loop {
            if let Frame::Event { event, .. } = frames.recv().await.unwrap() {
                return event;
            }
        }
    })
    .await
    .unwrap();
    assert_eq!(first.kind, EventKind::PlanStarted);

    let report = gateway.wait_execution(&s).await.unwrap();
    assert_eq!(report.outcome, Outcome::Completed);
    assert_eq!(sim.received(1), vec!["command", "takeoff", "land"]);

    // Approving again finds nothing pending.
    assert!(matches!(gateway.approve(&s).await, Err(GatewayError::NoPendingPlan)));
}

#[tokio::test]
async fn transcript_is_complete_and_gated() {
    let Rig { gateway, sim: _sim } = rig(2, FaultScript::default()).await;
    let s = gateway.create_session();
    let other = gateway.create_session();
    gateway.submit_task(&other, "take off drone 1 and land").await.unwrap();
    gateway.submit_task(&s, "Fly both drones").await.unwrap();
    gateway.approve(&s).await.unwrap();
    let report = gateway.wait_execution(&s).await.unwrap();
    assert!(report.outcome == Outcome::Completed, "{:#?}", report.events);

    let records = gateway.transcript().records_for(&s).unwrap();
    let kinds: Vec<_> = records.iter().map(|r| r.kind).collect();
    assert_eq!(&kinds[..4], &[RecordKind::Task, RecordKind::LlmReply, RecordKind::Plan, RecordKind::Approval]);
    let events: Vec<_> = records.iter().filter(|r| r.kind == RecordKind::Event).collect();
    assert_eq!(events.len(), report.events.len());
    for (record, event) in events.iter().zip(&report.events) {
        assert_eq!(record.payload, serde_json::to_string(event).unwrap());
    }
    assert_eq!(kinds.last(), Some(&RecordKind::Outcome));
    assert!(records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

    // Approval precedes every dispatch.
    let approval = kinds.iter().position(|k| *k == RecordKind::Approval).unwrap();
    let first_dispatch = records.iter().position(|r| r.kind == RecordKind::Event && r.payload.contains("\"Dispatched\"")).unwrap();
    assert!(approval < first_dispatch);

    // The other session was planned but never approved.
    let other_records = gateway.transcript().records_for(&other).unwrap();
    assert!(other_records.iter().all(|r| r.kind != RecordKind::Event && r.kind != RecordKind::Approval));
    assert!(gateway.session_info(&other).await.unwrap().pending_plan.is_some());
}

#[tokio::test]
async fn busy_session_and_fleet() {
    let Rig { gateway, sim: _sim } = rig(1, FaultScript::default()).await;
    let s = gateway.create_session();
    let t = gateway.create_session();
    gateway.submit_task(&s, "long hover").await.unwrap();
    gateway.submit_task(&t, "take off drone 1 and land").await.unwrap();
    gateway.approve(&s).await.unwrap();

    assert!(matches!(gateway.submit_task(&s, "take off drone 1 and land").await, Err(GatewayError::BusySession)));
    assert!(matches!(gateway.approve(&t).await, Err(GatewayError::FleetBusy)));

    gateway.abort(&s).unwrap();
    let report = gateway.wait_execution(&s).await.unwrap();
    assert!(matches!(report.outcome, Outcome::Aborted { .. }));
    assert!(matches!(gateway.abort(&s), Err(GatewayError::NoExecution)));

    // The fleet is free again.
    gateway.approve(&t).await.unwrap();
    assert!(gateway.wait_execution(&t).await.unwrap().outcome == Outcome::Completed);
}

#[tokio::test]
async fn unknown_drone_is_a_validation_failure() {
    let Rig { gateway, sim: _sim } = rig(2, FaultScript::default()).await;
    let s = gateway.create_session();
    let err = gateway.submit_task(&s, "take off drone 7").await.unwrap_err();
    let GatewayError::Planning(failure) = err else { panic!("{err}") };
    assert_eq!(failure.stage, PlanningStage::Validation);
    assert!(failure.details.iter().any(|d| d.contains("unknown drone 7")), "{:?}", failure.details);
    assert!(gateway.session_info(&s).await.unwrap().pending_plan.is_none());
    let kinds: Vec<_> = gateway.transcript().records_for(&s).unwrap().iter().map(|r| r.kind).collect();
    assert!(kinds.contains(&RecordKind::ValidationErrors));
}

#[tokio::test]
async fn repair_round_is_transcribed() {
    let Rig { gateway, sim: _sim } = rig(1, FaultScript::default()).await;
    let s = gateway.create_session();
    let preview = gateway.submit_task(&s, "needs repair").await.unwrap();
    assert_eq!(preview.repairs_used, 1);
    let kinds: Vec<_> = gateway.transcript().records_for(&s).unwrap().iter().map(|r| r.kind).collect();
    assert_eq!(
        kinds,
        vec![RecordKind::Task, RecordKind::LlmReply, RecordKind::ValidationErrors, RecordKind::LlmReply, RecordKind::Plan]
    );
}

#[tokio::test]
async fn reject_with_feedback_refines() {
    let Rig { gateway, sim: _sim } = rig(2, FaultScript::default()).await;
    let s = gateway.create_session();
    gateway.submit_task(&s, "take off drone 1 and land").await.unwrap();
    let before = gateway.history(&s).await.unwrap().len();
    gateway.reject(&s, Some("use drone 2 instead")).await.unwrap();
    let history = gateway.history(&s).await.unwrap();
    assert_eq!(history.len(), before + 1);
    assert_eq!(history.last().unwrap().role, Role::User);
    assert_eq!(history.last().unwrap().content, "use drone 2 instead");
    assert!(matches!(gateway.approve(&s).await, Err(GatewayError::NoPendingPlan)));
    assert!(matches!(gateway.reject(&s, None).await, Err(GatewayError::NoPendingPlan)));

    // Plain reject leaves history alone.
    gateway.submit_task(&s, "take off drone 1 and land").await.unwrap();
    let before = gateway.history(&s).await.unwrap().len();
    gateway.reject(&s, None).await.unwrap();
    assert_eq!(gateway.history(&s).await.unwrap().len(), before);
}

#[tokio::test]
async fn feedback_reaches_the_next_request() {
    let backend = Arc::new(ScriptedBackend::new(script()));
    let sim = spawn_fleet(SimConfig::loopback(2, 0, SCALE)).await.unwrap();
    let entries = sim.addresses().into_iter().map(|(n, address)| FleetEntry { id: id(n), address }).collect();
    let fleet = Fleet::connect(FleetConfig::new(entries).unwrap(), None).await.unwrap();
    let gateway = Gateway::new(fleet, backend.clone(), GatewayOptions::default(), Transcript::in_memory());
    let s = gateway.create_session();
    gateway.submit_task(&s, "take off drone 1 and land").await.unwrap();
    gateway.reject(&s, Some("use drone 2 instead")).await.unwrap();
    gateway.submit_task(&s, "try again").await.ok();
    let last = backend.requests().pop().unwrap();
    assert!(last.messages.iter().any(|m| m.role == Role::User && m.content == "use drone 2 instead"));
}

#[tokio::test]
async fn readiness_gate() {
    // Drone 2 drops the reply to its first motion command.
    let faults = FaultScript { faults: vec![FaultEntry { drone: 2, command: 2, kind: FaultKind::DropReply }] };
    let Rig { gateway, sim: _sim } = rig(2, faults).await;
    let s = gateway.create_session();
    gateway.submit_task(&s, "both drones").await.unwrap();
    gateway.approve(&s).await.unwrap();
    let report = gateway.wait_execution(&s).await.unwrap();
    assert!(matches!(report.outcome, Outcome::Aborted { .. }));

    let status = gateway.fleet_status();
    assert_eq!(status[0].status, SessionStatus::Ready);
    assert_eq!(status[1].status, SessionStatus::Disconnected);

    gateway.submit_task(&s, "both drones").await.unwrap();
    match gateway.approve(&s).await {
        Err(GatewayError::FleetNotReady(ids)) => assert_eq!(ids, vec![id(2)]),
        other => panic!("{:?}", other.map(|_| ())),
    }
    // The plan survives a failed approve and flies after reconnecting.
    gateway.reconnect().await;
    gateway.approve(&s).await.unwrap();
    assert_eq!(gateway.wait_execution(&s).await.unwrap().outcome, Outcome::Completed);
}

#[tokio::test]
async fn fleet_status_snapshot() {
    let Rig { gateway, sim: _sim } = rig(2, FaultScript::default()).await;
    let status = gateway.fleet_status();
    assert_eq!(status.len(), 2);
    assert!(status.iter().all(|d| d.status == SessionStatus::Ready));
    tokio::time::timeout(Duration::from_secs(2), async {
        while gateway.fleet_status().iter().any(|d| d.state.is_none()) {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    })
    .await
    .unwrap();
    assert!(gateway.fleet_status().iter().all(|d| d.state.as_ref().unwrap().battery == Some(100)));
}

#[tokio::test]
async fn unknown_session() {
    let Rig { gateway, sim: _sim } = rig(1, FaultScript::default()).await;
    assert!(matches!(gateway.submit_task("nope", "x").await, Err(GatewayError::UnknownSession(_))));
    assert!(matches!(gateway.subscribe("nope"), Err(GatewayError::UnknownSession(_))));
    let s = gateway.create_session();
    assert!(matches!(gateway.submit_task(&s, "   ").await, Err(GatewayError::EmptyTask)));
}
