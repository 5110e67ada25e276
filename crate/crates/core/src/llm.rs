//! Chat-completion backends and the plan-with-repair loop.
//!
//! [`HttpBackend`] speaks the common chat-completions JSON shape over HTTP.
//! [`ScriptedBackend`] returns canned replies keyed on the task text and
//! never touches the network; it is what tests and the simulator demos
//! run against.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, Plan, Roster};
use crate::prompt::{build_library_preamble, render_conversation, ChatMessage, PromptBundle, Role};

/// Opening words of every repair message sent back to the model.
pub const REPAIR_PREFIX: &str = "Your code had these errors:";

static LIVE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`HttpBackend::complete`] calls made by this process.
pub fn live_call_count() -> u64 {
    LIVE_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RequestError {
    #[error("a completion request needs at least one message, starting with the system prompt")]
    NoSystemMessage,
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f32),
    #[error("max_tokens must be positive")]
    MaxTokens,
}

impl CompletionRequest {
    pub fn new(
        messages: Vec<ChatMessage>,
        model: impl Into<String>,
        temperature: f32,
        max_tokens: u32,
    ) -> Result<Self, RequestError> {
        if messages.first().map(|m| m.role) != Some(Role::System) {
            return Err(RequestError::NoSystemMessage);
        }
        if !(0.0..=2.0).contains(&temperature) {
            return Err(RequestError::Temperature(temperature));
        }
        if max_tokens == 0 {
            return Err(RequestError::MaxTokens);
        }
        Ok(CompletionRequest { model: model.into(), messages, temperature, max_tokens })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionOutcome {
    Reply(String),
    TransportFailure(String),
    EmptyReply,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> CompletionOutcome;
}

/// Runs one completion and normalizes blank replies to `EmptyReply`.
pub async fn complete(request: &CompletionRequest, backend: &dyn ChatBackend) -> CompletionOutcome {
    match backend.complete(request).await {
        CompletionOutcome::Reply(text) if text.trim().is_empty() => CompletionOutcome::EmptyReply,
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    #[serde(with = "millis")]
    pub request_timeout: Duration,
    /// Sleep before each retry; its length is the retry budget.
    #[serde(with = "millis_vec")]
    pub backoff: Vec<Duration>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            api_key_env: Some("OPENAI_API_KEY".to_string()),
            request_timeout: Duration::from_secs(60),
            backoff: vec![Duration::from_millis(500), Duration::from_secs(2)],
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

mod millis_vec {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &[Duration], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(d.iter().map(|d| d.as_millis() as u64))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Duration>, D::Error> {
        Ok(Vec::<u64>::deserialize(d)?.into_iter().map(Duration::from_millis).collect())
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::Client,
    attempts: AtomicUsize,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

enum Attempt {
    Done(CompletionOutcome),
    Retry(String),
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, reqwest::Error> {
        let client = reqwest::Client::builder().timeout(config.request_timeout).build()?;
        Ok(HttpBackend { config, client, attempts: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    /// HTTP attempts made, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    async fn attempt(&self, request: &CompletionRequest) -> Attempt {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let mut builder = self.client.post(&self.config.endpoint).json(request);
        if let Some(var) = &self.config.api_key_env {
            if let Ok(key) = std::env::var(var) {
                builder = builder.bearer_auth(key);
            }
        }
        let response = match builder.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.without_url().to_string()),
        };
        let status = response.status();
        if !status.is_success() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        match response.json::<WireResponse>().await {
            Ok(body) => {
                let content = body.choices.into_iter().next().and_then(|c| c.message.content);
                match content {
                    Some(text) if !text.trim().is_empty() => Attempt::Done(CompletionOutcome::Reply(text)),
                    _ => Attempt::Done(CompletionOutcome::EmptyReply),
                }
            }
            Err(e) => Attempt::Done(CompletionOutcome::TransportFailure(format!("bad response body: {e}"))),
        }
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(&self, request: &CompletionRequest) -> CompletionOutcome {
        LIVE_CALLS.fetch_add(1, Ordering::SeqCst);
        let mut last_error = String::new();
        for attempt in 0..=self.config.backoff.len() {
            if attempt > 0 {
                tokio::time::sleep(self.config.backoff[attempt - 1]).await;
            }
            match self.attempt(request).await {
                Attempt::Done(outcome) => return outcome,
                Attempt::Retry(err) => {
                    tracing::warn!(attempt = attempt + 1, error = %err, "llm request failed");
                    last_error = err;
                }
            }
        }
        CompletionOutcome::TransportFailure(format!(
            "{} attempts failed, last error: {last_error}",
            self.config.backoff.len() + 1
        ))
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// Canned replies for tasks containing `when` (case-insensitive). Replies
/// are served in order; the last one repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub when: String,
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default, rename = "rule")]
    pub rules: Vec<ScriptRule>,
    /// Served when no rule matches; without it the reply is empty.
    #[serde(default)]
    pub default: Option<String>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading mock script: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing mock script: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("rule `{0}` has no replies")]
    NoReplies(String),
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let script: Script = toml::from_str(text)?;
        if let Some(rule) = script.rules.iter().find(|r| r.replies.is_empty()) {
            return Err(ScriptError::NoReplies(rule.when.clone()));
        }
        Ok(script)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScriptError> {
        Script::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Deterministic, network-free backend.
///
/// The task is found by scanning user messages newest first, skipping
/// repair messages, with the function-library preamble removed.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    preamble: String,
    cursors: Mutex<Vec<usize>>,
    calls: AtomicUsize,
    log: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let cursors = vec![0; script.rules.len()];
        ScriptedBackend {
            script,
            preamble: build_library_preamble(dsl::FUNCTIONS),
            cursors: Mutex::new(cursors),
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// A single rule.
    pub fn with_rule(when: &str, replies: &[&str]) -> Self {
        ScriptedBackend::new(Script {
            rules: vec![ScriptRule { when: when.into(), replies: replies.iter().map(|s| s.to_string()).collect() }],
            default: None,
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().unwrap().clone()
    }

    fn matching_rule(&self, request: &CompletionRequest) -> Option<usize> {
        request
            .messages
            .iter()
            .rev()
            .filter(|m| m.role == Role::User && !m.content.starts_with(REPAIR_PREFIX))
            .find_map(|m| {
                let text = m.content.replace(&self.preamble, "").to_lowercase();
                self.script.rules.iter().position(|r| text.contains(&r.when.to_lowercase()))
            })
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(&self, request: &CompletionRequest) -> CompletionOutcome {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        let reply = match self.matching_rule(request) {
            Some(idx) => {
                let mut cursors = self.cursors.lock().unwrap();
                let replies = &self.script.rules[idx].replies;
                let reply = replies[cursors[idx].min(replies.len() - 1)].clone();
                cursors[idx] += 1;
                Some(reply)
            }
            None => self.script.default.clone(),
        };
        match reply {
            Some(text) if !text.is_empty() => CompletionOutcome::Reply(text),
            _ => CompletionOutcome::EmptyReply,
        }
    }
}

// ---------------------------------------------------------------------------
// Code extraction

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no plan code found in reply: {excerpt:?}")]
pub struct NoCodeFound {
    pub excerpt: String,
}

fn looks_like_call(line: &str) -> bool {
    dsl::tokenize(line)
        .ok()
        .and_then(|t| dsl::parse(&t).ok())
        .is_some_and(|stmts| !stmts.is_empty())
}

/// Returns the body of the first fenced block, or the whole reply when it
/// has no fence but at least one line parses as a call.
pub fn extract_code(reply: &str) -> Result<String, NoCodeFound> {
    const FENCE: &str = "```";
    if let Some(open) = reply.find(FENCE) {
        let after = &reply[open + FENCE.len()..];
        // The rest of the opening line is a language tag.
        let body = match after.find('\n') {
            Some(nl) => &after[nl + 1..],
            None => "",
        };
        let body = match body.find(FENCE) {
            Some(close) => &body[..close],
            None => body,
        };
        return Ok(body.trim().to_string());
    }
    if reply.lines().any(looks_like_call) {
        return Ok(reply.trim().to_string());
    }
    Err(NoCodeFound { excerpt: reply.chars().take(80).collect() })
}

// ---------------------------------------------------------------------------
// Planning with repair

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanningSettings {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
    pub max_repairs: u32,
}

impl Default for PlanningSettings {
    fn default() -> Self {
        PlanningSettings { model: "gpt-4o".to_string(), temperature: 0.0, max_tokens: 1024, max_repairs: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanningStage {
    Request,
    Transport,
    Extraction,
    Parse,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("planning failed at {stage:?} stage: {}", details.join("; "))]
pub struct PlanningFailure {
    pub stage: PlanningStage,
    pub details: Vec<String>,
    /// Every raw model reply, in order.
    pub replies: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PlanningSuccess {
    pub plan: Plan,
    pub repairs_used: u32,
    pub replies: Vec<String>,
    /// The conversation sent on the final request.
    pub conversation: Vec<ChatMessage>,
}

/// Builds the repair turn sent after a bad reply.
pub fn repair_message(errors: &[String]) -> String {
    format!("{REPAIR_PREFIX} {}; re-emit a corrected full program.", errors.join("; "))
}

fn check_reply(reply: &str, roster: &(impl Roster + ?Sized)) -> Result<Plan, (PlanningStage, Vec<String>)> {
    let code = extract_code(reply).map_err(|e| (PlanningStage::Extraction, vec![e.to_string()]))?;
    match dsl::parse_plan(&code, roster) {
        Ok(plan) => Ok(plan),
        Err(e @ dsl::PlanSourceError::Invalid(_)) => Err((PlanningStage::Validation, e.messages())),
        Err(e) => Err((PlanningStage::Parse, e.messages())),
    }
}

/// Asks the model for a plan for `bundle.task_text`, sending at most
/// `max_repairs` correction rounds. Each round appends the model's reply
/// and a repair message to the conversation.
///
/// Unless the model could not be reached, the task, every reply and every
/// repair message are appended to the bundle history.
pub async fn plan_with_repair(
    bundle: &mut PromptBundle,
    roster: &(impl Roster + ?Sized),
    backend: &dyn ChatBackend,
    settings: &PlanningSettings,
) -> Result<PlanningSuccess, PlanningFailure> {
    let mut conversation = render_conversation(bundle);
    let base_len = conversation.len();
    let mut replies = Vec::new();
    let mut repairs_used = 0;

    let failure = |stage, details, replies| PlanningFailure { stage, details, replies };

    let result = loop {
        let request = CompletionRequest::new(
            conversation.clone(),
            &settings.model,
            settings.temperature,
            settings.max_tokens,
        )
        .map_err(|e| failure(PlanningStage::Request, vec![e.to_string()], replies.clone()))?;

        let reply = match complete(&request, backend).await {
            CompletionOutcome::Reply(text) => text,
            CompletionOutcome::TransportFailure(detail) => {
                return Err(failure(PlanningStage::Transport, vec![detail], replies));
            }
            CompletionOutcome::EmptyReply => {
                break Err(failure(PlanningStage::Transport, vec!["model returned an empty reply".into()], replies.clone()));
            }
        };
        replies.push(reply.clone());

        match check_reply(&reply, roster) {
            Ok(plan) => break Ok((plan, reply)),
            Err((stage, details)) if repairs_used >= settings.max_repairs => {
                conversation.push(ChatMessage { role: Role::Assistant, content: reply });
                break Err(failure(stage, details, replies.clone()));
            }
            Err((_, details)) => {
                repairs_used += 1;
                conversation.push(ChatMessage { role: Role::Assistant, content: reply });
                conversation.push(ChatMessage { role: Role::User, content: repair_message(&details) });
            }
        }
    };

    // Commit the turn: the bare task, then everything after the first
    // request's messages.
    let mut turn = Vec::new();
    if let Ok(task) = ChatMessage::new(Role::User, bundle.task_text.clone()) {
        turn.push(task);
    }
    turn.extend(conversation[base_len..].iter().cloned());
    if let Ok((_, reply)) = &result {
        turn.push(ChatMessage { role: Role::Assistant, content: reply.clone() });
    }
    for message in turn {
        let _ = bundle.push_history(message);
    }

    let (plan, _) = result?;
    Ok(PlanningSuccess { plan, repairs_used, replies, conversation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::DroneId;
    use std::collections::BTreeSet;
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    fn fleet(n: u32) -> BTreeSet<DroneId> {
        (1..=n).filter_map(DroneId::new).collect()
    }

    fn request(task: &str) -> CompletionRequest {
        let bundle = PromptBundle::default().with_task(task);
        CompletionRequest::new(render_conversation(&bundle), "m", 0.0, 64).unwrap()
    }

    #[test]
    fn request_invariants() {
        let user = ChatMessage::new(Role::User, "hi").unwrap();
        assert_eq!(CompletionRequest::new(vec![], "m", 0.0, 1), Err(RequestError::NoSystemMessage));
        assert_eq!(CompletionRequest::new(vec![user], "m", 0.0, 1), Err(RequestError::NoSystemMessage));
        let sys = vec![ChatMessage::new(Role::System, "s").unwrap()];
        assert!(CompletionRequest::new(sys.clone(), "m", 2.5, 1).is_err());
        assert!(CompletionRequest::new(sys.clone(), "m", 0.0, 0).is_err());
        assert!(CompletionRequest::new(sys, "m", 2.0, 1).is_ok());
    }

    #[test]
    fn extract_fenced() {
        assert_eq!(extract_code("```\ntakeoff(1)\n```").unwrap(), "takeoff(1)");
        assert_eq!(extract_code("Sure! ```\nland(1)\n``` Done.").unwrap(), "land(1)");
        assert_eq!(extract_code("```python\nland(1)\n```\n```\ntakeoff(2)\n```").unwrap(), "land(1)");
        assert_eq!(extract_code("```dsl\ntakeoff(1)\nland(1)").unwrap(), "takeoff(1)\nland(1)");
    }

    #[test]
    fn extract_unfenced_and_none() {
        assert_eq!(extract_code("  takeoff(1)\nland(1)\n").unwrap(), "takeoff(1)\nland(1)");
        assert!(extract_code("I cannot help with that.").is_err());
        assert!(extract_code("").is_err());
    }

    #[tokio::test]
    async fn scripted_matches_task_not_preamble() {
        let backend = ScriptedBackend::with_rule("take off", &["```\ntakeoff(1)\n```"]);
        // The preamble itself says "Take off and climb"; only the task counts.
        assert_eq!(backend.complete(&request("land everything")).await, CompletionOutcome::EmptyReply);
        match backend.complete(&request("Take off drone 1")).await {
            CompletionOutcome::Reply(text) => assert!(text.contains("takeoff(1)")),
            other => panic!("{other:?}"),
        }
        assert_eq!(backend.calls(), 2);
        assert_eq!(backend.requests().len(), 2);
    }

    #[tokio::test]
    async fn empty_reply_is_reported() {
        let backend = ScriptedBackend::with_rule("x", &[""]);
        assert_eq!(complete(&request("x"), &backend).await, CompletionOutcome::EmptyReply);
    }

    #[test]
    fn script_file_format() {
        let script = Script::from_toml(
            r#"
            default = "I cannot help with that."
            [[rule]]
            when = "take off"
            replies = ["```\ntakeoff(1)\n```"]
            "#,
        )
        .unwrap();
        assert_eq!(script.rules.len(), 1);
        assert!(Script::from_toml("[[rule]]\nwhen = \"x\"\nreplies = []").is_err());
    }

    #[tokio::test]
    async fn plan_first_try() {
        let backend = ScriptedBackend::with_rule("take off", &["```\ntakeoff(1)\nland(1)\n```"]);
        let mut bundle = PromptBundle::default().with_task("take off drone 1 and land");
        let ok = plan_with_repair(&mut bundle, &fleet(1), &backend, &PlanningSettings::default()).await.unwrap();
        assert_eq!(ok.repairs_used, 0);
        assert_eq!(ok.plan.statements().len(), 2);
        assert_eq!(bundle.history().len(), 2);
        assert_eq!(bundle.history()[0].content, "take off drone 1 and land");
    }

    #[tokio::test]
    async fn plan_with_one_repair() {
        let backend = ScriptedBackend::with_rule("take off", &["```\njump(1)\n```", "```\ntakeoff(1)\n```"]);
        let mut bundle = PromptBundle::default().with_task("take off drone 1");
        let ok = plan_with_repair(&mut bundle, &fleet(1), &backend, &PlanningSettings::default()).await.unwrap();
        assert_eq!(ok.repairs_used, 1);
        let sent = backend.requests();
        assert_eq!(sent.len(), 2);
        assert_eq!(sent[1].messages.len(), sent[0].messages.len() + 2);
        assert_eq!(sent[1].messages[..sent[0].messages.len()], sent[0].messages[..]);
        let repair = &sent[1].messages.last().unwrap().content;
        assert!(repair.starts_with(REPAIR_PREFIX) && repair.contains("unknown function `jump`"));
        // task, bad reply, repair, good reply
        assert_eq!(bundle.history().len(), 4);
    }

    #[tokio::test]
    async fn repair_budget_exhausted() {
        let backend = ScriptedBackend::with_rule("take off", &["```\njump(1)\n```"]);
        let mut bundle = PromptBundle::default().with_task("take off drone 1");
        let err = plan_with_repair(&mut bundle, &fleet(1), &backend, &PlanningSettings::default()).await.unwrap_err();
        assert_eq!(err.stage, PlanningStage::Validation);
        assert_eq!(err.replies.len(), 2);
        assert!(err.details[0].contains("jump"));
        assert_eq!(backend.calls(), 2);
    }

    #[tokio::test]
    async fn zero_repairs_and_parse_stage() {
        let backend = ScriptedBackend::with_rule("go", &["```\ntakeoff 1\n```"]);
        let mut bundle = PromptBundle::default().with_task("go");
        let settings = PlanningSettings { max_repairs: 0, ..Default::default() };
        let err = plan_with_repair(&mut bundle, &fleet(1), &backend, &settings).await.unwrap_err();
        assert_eq!(err.stage, PlanningStage::Parse);
        assert_eq!(backend.calls(), 1);
    }

    #[tokio::test]
    async fn no_code_is_extraction_failure() {
        let backend = ScriptedBackend::with_rule("go", &["I cannot help with that."]);
        let mut bundle = PromptBundle::default().with_task("go");
        let err = plan_with_repair(&mut bundle, &fleet(1), &backend, &PlanningSettings::default()).await.unwrap_err();
        assert_eq!(err.stage, PlanningStage::Extraction);
    }

    #[tokio::test]
    async fn unreachable_endpoint_fails_after_three_attempts() {
        // Bind then drop to get a closed local port.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            api_key_env: None,
            backoff: vec![Duration::from_millis(5), Duration::from_millis(10)],
            ..Default::default()
        })
        .unwrap();
        let outcome = backend.complete(&request("take off")).await;
        assert!(matches!(outcome, CompletionOutcome::TransportFailure(_)), "{outcome:?}");
        assert_eq!(backend.attempts(), 3);
    }

    /// Serves one canned HTTP response per connection and returns the
    /// request bodies it saw.
    async fn one_shot_server(responses: Vec<(u16, String)>) -> (String, tokio::task::JoinHandle<Vec<String>>) {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = tokio::spawn(async move {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().await.unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body_in = loop {
                    let n = stream.read(&mut chunk).await.unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(split) = text.find("\r\n\r\n") {
                        let len: usize = text
                            .lines()
                            .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= split + 4 + len {
                            break text[split + 4..].to_string();
                        }
                    }
                };
                bodies.push(body_in);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).await.unwrap();
                stream.shutdown().await.ok();
            }
            bodies
        });
        (url, handle)
    }

    #[tokio::test]
    async fn http_backend_round_trip_with_retry() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"```\ntakeoff(1)\n```"}}]}"#;
        let (url, server) = one_shot_server(vec![(503, "{}".into()), (200, ok.into())]).await;
        let before = live_call_count();
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: url,
            api_key_env: None,
            backoff: vec![Duration::from_millis(5), Duration::from_millis(5)],
            ..Default::default()
        })
        .unwrap();
        let mut req = request("take off");
        req.model = "test-model".into();
        let outcome = backend.complete(&req).await;
        assert_eq!(outcome, CompletionOutcome::Reply("```\ntakeoff(1)\n```".into()));
        assert_eq!(backend.attempts(), 2);
        assert!(live_call_count() > before);
        let bodies = server.await.unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["max_tokens"], 64);
        assert_eq!(sent["messages"][0]["role"], "system");
        assert!(sent["messages"][1]["content"].as_str().unwrap().contains("Task: take off"));
    }

    #[tokio::test]
    async fn http_backend_empty_content() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":""}}]}"#;
        let (url, _server) = one_shot_server(vec![(200, body.into())]).await;
        let backend =
            HttpBackend::new(HttpBackendConfig { endpoint: url, api_key_env: None, ..Default::default() }).unwrap();
        assert_eq!(backend.complete(&request("x")).await, CompletionOutcome::EmptyReply);
    }
}
