//! UDP control sessions and telemetry for Tello-compatible drones.
//!
//! Every drone gets its own command socket, so a reply is always matched to
//! the drone it came from. A session allows one command in flight: a
//! dispatch while another is awaiting its reply fails with
//! [`LinkError::NotReady`]. Motion commands are never retried; only the
//! `command` handshake and `battery?` query are.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::sync::broadcast;
use tokio::task::JoinHandle;

use crate::dsl::Roster;
use crate::motion::{self, decode_response, encode_action, Ack, DroneAction, DroneId, Motion, Reply};

pub const DEFAULT_CONTROL_PORT: u16 = 8889;
pub const DEFAULT_TELEMETRY_PORT: u16 = 8890;
pub const DEFAULT_COMMAND_TIMEOUT: Duration = Duration::from_secs(10);
/// Extra attempts for idempotent commands.
pub const IDEMPOTENT_RETRIES: u32 = 2;

// ---------------------------------------------------------------------------
// Fleet configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub id: DroneId,
    /// `ip` or `ip:port`; the port defaults to 8889.
    #[serde(deserialize_with = "de_drone_address")]
    pub address: SocketAddr,
}

fn de_drone_address<'de, D: Deserializer<'de>>(d: D) -> Result<SocketAddr, D::Error> {
    let text = String::deserialize(d)?;
    parse_drone_address(&text).map_err(serde::de::Error::custom)
}

pub fn parse_drone_address(text: &str) -> Result<SocketAddr, String> {
    if let Ok(addr) = text.parse::<SocketAddr>() {
        return Ok(addr);
    }
    text.parse::<IpAddr>()
        .map(|ip| SocketAddr::new(ip, DEFAULT_CONTROL_PORT))
        .map_err(|_| format!("invalid drone address `{text}`"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(rename = "drone", default)]
    pub entries: Vec<FleetEntry>,
    #[serde(default = "default_telemetry_port")]
    pub telemetry_port: u16,
    #[serde(default = "default_timeout_ms")]
    pub command_timeout_ms: u64,
}

fn default_telemetry_port() -> u16 {
    DEFAULT_TELEMETRY_PORT
}

fn default_timeout_ms() -> u64 {
    DEFAULT_COMMAND_TIMEOUT.as_millis() as u64
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading fleet config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing fleet config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("fleet config has no drones")]
    Empty,
    #[error("drone id {0} appears more than once")]
    DuplicateId(DroneId),
    #[error("address {0} appears more than once")]
    DuplicateAddress(SocketAddr),
}

impl FleetConfig {
    pub fn new(entries: Vec<FleetEntry>) -> Result<Self, ConfigError> {
        let config = FleetConfig {
            entries,
            telemetry_port: DEFAULT_TELEMETRY_PORT,
            command_timeout_ms: default_timeout_ms(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.command_timeout_ms = timeout.as_millis() as u64;
        self
    }

    pub fn with_telemetry_port(mut self, port: u16) -> Self {
        self.telemetry_port = port;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: FleetConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        FleetConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut out = format!("telemetry_port = {}\ncommand_timeout_ms = {}\n", self.telemetry_port, self.command_timeout_ms);
        for e in &self.entries {
            out.push_str(&format!("\n[[drone]]\nid = {}\naddress = \"{}\"\n", e.id, e.address));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.entries.is_empty() {
            return Err(ConfigError::Empty);
        }
        let mut ids = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id) {
                return Err(ConfigError::DuplicateId(e.id));
            }
            if !addrs.insert(e.address) {
                return Err(ConfigError::DuplicateAddress(e.address));
            }
        }
        Ok(())
    }

    pub fn command_timeout(&self) -> Duration {
        Duration::from_millis(self.command_timeout_ms)
    }

    pub fn entry(&self, id: DroneId) -> Option<&FleetEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> BTreeSet<DroneId> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

impl Roster for FleetConfig {
    fn contains_drone(&self, id: DroneId) -> bool {
        self.entry(id).is_some()
    }
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Disconnected = 0,
    Ready = 1,
    Busy = 2,
}

impl SessionStatus {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => SessionStatus::Ready,
            2 => SessionStatus::Busy,
            _ => SessionStatus::Disconnected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("no `ok` to `command` after {attempts} attempt(s)")]
    HandshakeTimeout { attempts: u32 },
    #[error("drone refused SDK mode: {0}")]
    HandshakeNack(String),
    #[error("session is {0:?}, not ready")]
    NotReady(SessionStatus),
    #[error("no reply within {0:?}")]
    DispatchTimeout(Duration),
    #[error("drone replied `{0}`")]
    Nack(String),
    #[error("hover has no wire command")]
    NoWireForm,
    #[error("socket error: {0}")]
    Io(String),
}

/// Control session for one drone.
#[derive(Debug)]
pub struct DroneSession {
    id: DroneId,
    address: SocketAddr,
    socket: UdpSocket,
    timeout: Duration,
    status: AtomicU8,
    last_ack: Mutex<Option<Ack>>,
    commands_sent: AtomicU64,
}

/// Restores a status on drop unless disarmed, so a cancelled await never
/// leaves a session stuck in Busy.
struct StatusGuard<'a> {
    session: &'a DroneSession,
    on_drop: Option<SessionStatus>,
}

impl StatusGuard<'_> {
    fn finish(mut self, status: SessionStatus) {
        self.on_drop = None;
        self.session.set_status(status);
    }
}

impl Drop for StatusGuard<'_> {
    fn drop(&mut self) {
        if let Some(status) = self.on_drop {
            self.session.set_status(status);
        }
    }
}

enum Wait {
    Reply(Reply, Duration),
    Timeout,
    Io(String),
}

fn local_bind_for(remote: SocketAddr) -> SocketAddr {
    let ip = match remote.ip() {
        IpAddr::V4(v4) if v4.is_loopback() => IpAddr::V4(Ipv4Addr::LOCALHOST),
        IpAddr::V4(_) => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
        IpAddr::V6(v6) if v6.is_loopback() => IpAddr::V6(Ipv6Addr::LOCALHOST),
        IpAddr::V6(_) => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
    };
    SocketAddr::new(ip, 0)
}

impl DroneSession {
    /// Binds a command socket without talking to the drone. The session
    /// starts Disconnected.
    pub async fn open(entry: FleetEntry, timeout: Duration) -> Result<Self, LinkError> {
        let socket = UdpSocket::bind(local_bind_for(entry.address)).await.map_err(|e| LinkError::Io(e.to_string()))?;
        Ok(DroneSession {
            id: entry.id,
            address: entry.address,
            socket,
            timeout,
            status: AtomicU8::new(SessionStatus::Disconnected as u8),
            last_ack: Mutex::new(None),
            commands_sent: AtomicU64::new(0),
        })
    }

    pub fn id(&self) -> DroneId {
        self.id
    }

    pub fn address(&self) -> SocketAddr {
        self.address
    }

    pub fn status(&self) -> SessionStatus {
        SessionStatus::from_u8(self.status.load(Ordering::SeqCst))
    }

    pub fn last_ack(&self) -> Option<Ack> {
        self.last_ack.lock().unwrap().clone()
    }

    /// Accepted motion dispatches so far.
    pub fn commands_sent(&self) -> u64 {
        self.commands_sent.load(Ordering::SeqCst)
    }

    fn set_status(&self, status: SessionStatus) {
        self.status.store(status as u8, Ordering::SeqCst);
    }

    fn claim(&self, from: &[SessionStatus], on_drop: SessionStatus) -> Result<StatusGuard<'_>, LinkError> {
        for &state in from {
            if self
                .status
                .compare_exchange(state as u8, SessionStatus::Busy as u8, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                return Ok(StatusGuard { session: self, on_drop: Some(on_drop) });
            }
        }
        Err(LinkError::NotReady(self.status()))
    }

    /// Discards anything already queued on the socket, e.g. a late reply to
    /// a command that timed out.
    fn drain(&self) {
        let mut buf = [0u8; 1024];
        while self.socket.try_recv_from(&mut buf).is_ok() {}
    }

    async fn send_and_wait(&self, line: &str) -> Wait {
        self.drain();
        let started = Instant::now();
        if let Err(e) = self.socket.send_to(line.as_bytes(), self.address).await {
            return Wait::Io(e.to_string());
        }
        let deadline = tokio::time::Instant::now() + self.timeout;
        let mut buf = [0u8; 1024];
        loop {
            match tokio::time::timeout_at(deadline, self.socket.recv_from(&mut buf)).await {
                Err(_) => return Wait::Timeout,
                // ICMP unreachable and similar: keep waiting for the deadline.
                Ok(Err(_)) => continue,
                Ok(Ok((n, from))) => {
                    if from != self.address {
                        tracing::debug!(drone = %self.id, %from, "ignoring datagram from another address");
                        continue;
                    }
                    match decode_response(&buf[..n]) {
                        Ok(reply) => return Wait::Reply(reply, started.elapsed()),
                        Err(_) => continue,
                    }
                }
            }
        }
    }

    fn record(&self, reply: Reply, latency: Duration) -> Ack {
        let ack = Ack { reply, latency };
        *self.last_ack.lock().unwrap() = Some(ack.clone());
        ack
    }

    /// Sends `command` until the drone answers, up to three attempts.
    /// Works from Disconnected (reconnect) or Ready.
    pub async fn handshake(&self) -> Result<Ack, LinkError> {
        let guard = self.claim(&[SessionStatus::Disconnected, SessionStatus::Ready], SessionStatus::Disconnected)?;
        let attempts = 1 + IDEMPOTENT_RETRIES;
        for attempt in 1..=attempts {
            match self.send_and_wait(motion::ENTER_SDK).await {
                Wait::Reply(Reply::Ok, latency) => {
                    let ack = self.record(Reply::Ok, latency);
                    guard.finish(SessionStatus::Ready);
                    return Ok(ack);
                }
                Wait::Reply(reply, latency) => {
                    self.record(reply.clone(), latency);
                    let text = match reply {
                        Reply::Error(text) => text,
                        Reply::Value(v) => v.to_string(),
                        Reply::Ok => unreachable!(),
                    };
                    return Err(LinkError::HandshakeNack(text));
                }
                Wait::Timeout | Wait::Io(_) => {
                    tracing::warn!(drone = %self.id, attempt, "handshake attempt got no reply");
                }
            }
        }
        Err(LinkError::HandshakeTimeout { attempts })
    }

    /// Sends one motion command and waits for its reply. Never retried: a
    /// timeout leaves the session Disconnected.
    pub async fn dispatch(&self, action: &DroneAction) -> Result<Ack, LinkError> {
        let line = encode_action(action).ok_or(LinkError::NoWireForm)?;
        let guard = self.claim(&[SessionStatus::Ready], SessionStatus::Disconnected)?;
        self.send_motion(&line, guard, SessionStatus::Ready).await
    }

    /// Best-effort `land` used when aborting. Unlike [`dispatch`](Self::dispatch)
    /// it is also attempted on a Disconnected session, since a lost reply
    /// does not mean the drone is gone. A Disconnected session stays
    /// Disconnected even if the land is acked; only a handshake brings it
    /// back.
    pub async fn dispatch_safe_land(&self) -> Result<Ack, LinkError> {
        let was = self.status();
        let guard = self.claim(&[SessionStatus::Ready, SessionStatus::Disconnected], SessionStatus::Disconnected)?;
        let line = encode_action(&DroneAction::new(self.id, Motion::Land)).expect("land has a wire form");
        let settled = if was == SessionStatus::Disconnected { SessionStatus::Disconnected } else { SessionStatus::Ready };
        self.send_motion(&line, guard, settled).await
    }

    async fn send_motion(&self, line: &str, guard: StatusGuard<'_>, settled: SessionStatus) -> Result<Ack, LinkError> {
        self.commands_sent.fetch_add(1, Ordering::SeqCst);
        match self.send_and_wait(line).await {
            Wait::Reply(Reply::Error(text), latency) => {
                self.record(Reply::Error(text.clone()), latency);
                guard.finish(settled);
                Err(LinkError::Nack(text))
            }
            Wait::Reply(reply, latency) => {
                let ack = self.record(reply, latency);
                guard.finish(settled);
                Ok(ack)
            }
            Wait::Timeout => {
                guard.finish(SessionStatus::Disconnected);
                Err(LinkError::DispatchTimeout(self.timeout))
            }
            Wait::Io(e) => {
                guard.finish(SessionStatus::Disconnected);
                Err(LinkError::Io(e))
            }
        }
    }

    /// Battery percentage. Idempotent, so retried like the handshake.
    pub async fn query_battery(&self) -> Result<i64, LinkError> {
        let guard = self.claim(&[SessionStatus::Ready], SessionStatus::Ready)?;
        for _ in 0..=IDEMPOTENT_RETRIES {
            match self.send_and_wait(motion::BATTERY_QUERY).await {
                Wait::Reply(Reply::Value(v), latency) => {
                    self.record(Reply::Value(v), latency);
                    guard.finish(SessionStatus::Ready);
                    return Ok(v);
                }
                Wait::Reply(other, _) => {
                    guard.finish(SessionStatus::Ready);
                    return Err(LinkError::Nack(format!("{other:?}")));
                }
                Wait::Timeout | Wait::Io(_) => {}
            }
        }
        Err(LinkError::DispatchTimeout(self.timeout))
    }
}

/// Opens a session and performs the SDK-mode handshake.
pub async fn connect(entry: FleetEntry, timeout: Duration) -> Result<DroneSession, LinkError> {
    let session = DroneSession::open(entry, timeout).await?;
    session.handshake().await?;
    Ok(session)
}

// ---------------------------------------------------------------------------
// Telemetry

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateReport {
    pub address: SocketAddr,
    pub pitch: Option<i32>,
    pub roll: Option<i32>,
    pub yaw: Option<i32>,
    pub height_cm: Option<i32>,
    /// Percent, always within 0..=100.
    pub battery: Option<u8>,
    /// Keys without a typed field, kept verbatim.
    pub extra: BTreeMap<String, String>,
    /// Milliseconds since the Unix epoch.
    pub received_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed telemetry: {0:?}")]
pub struct MalformedTelemetry(pub String);

/// Parses a `key:value;key:value;` telemetry datagram.
pub fn parse_state(datagram: &[u8], from: SocketAddr) -> Result<StateReport, MalformedTelemetry> {
    let text = String::from_utf8_lossy(datagram);
    let mut report = StateReport {
        address: from,
        pitch: None,
        roll: None,
        yaw: None,
        height_cm: None,
        battery: None,
        extra: BTreeMap::new(),
        received_at_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
    };
    let mut pairs = 0;
    for field in text.trim().split(';') {
        let Some((key, value)) = field.split_once(':') else { continue };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            continue;
        }
        pairs += 1;
        let int = value.parse::<i32>().ok();
        let slot = match key {
            "pitch" => &mut report.pitch,
            "roll" => &mut report.roll,
            "yaw" => &mut report.yaw,
            "h" => &mut report.height_cm,
            "bat" => {
                match int.and_then(|b| u8::try_from(b).ok()).filter(|b| *b <= 100) {
                    Some(b) => report.battery = Some(b),
                    None => {
                        report.extra.insert(key.to_string(), value.to_string());
                    }
                }
                continue;
            }
            _ => {
                report.extra.insert(key.to_string(), value.to_string());
                continue;
            }
        };
        match int {
            Some(v) => *slot = Some(v),
            None => {
                report.extra.insert(key.to_string(), value.to_string());
            }
        }
    }
    if pairs == 0 {
        return Err(MalformedTelemetry(text.chars().take(64).collect()));
    }
    Ok(report)
}

/// Shared telemetry listener. Keeps the latest report per source address
/// and republishes every report on a broadcast channel.
#[derive(Debug)]
pub struct TelemetryHub {
    local_addr: SocketAddr,
    latest: Arc<Mutex<HashMap<SocketAddr, StateReport>>>,
    tx: broadcast::Sender<StateReport>,
    task: JoinHandle<()>,
}

impl TelemetryHub {
    pub async fn bind(addr: SocketAddr) -> std::io::Result<Self> {
        let socket = UdpSocket::bind(addr).await?;
        let local_addr = socket.local_addr()?;
        let latest = Arc::new(Mutex::new(HashMap::new()));
        let (tx, _) = broadcast::channel(256);
        let task = tokio::spawn({
            let latest = latest.clone();
            let tx = tx.clone();
            async move {
                let mut buf = [0u8; 2048];
                loop {
                    let Ok((n, from)) = socket.recv_from(&mut buf).await else { continue };
                    match parse_state(&buf[..n], from) {
                        Ok(report) => {
                            latest.lock().unwrap().insert(from, report.clone());
                            let _ = tx.send(report);
                        }
                        Err(e) => tracing::debug!(%from, error = %e, "dropping telemetry"),
                    }
                }
            }
        });
        Ok(TelemetryHub { local_addr, latest, tx, task })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn latest(&self, address: SocketAddr) -> Option<StateReport> {
        self.latest.lock().unwrap().get(&address).cloned()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StateReport> {
        self.tx.subscribe()
    }
}

impl Drop for TelemetryHub {
    fn drop(&mut self) {
        self.task.abort();
    }
}

// ---------------------------------------------------------------------------
// Fleet

/// Sessions for every configured drone plus the optional telemetry hub.
#[derive(Debug)]
pub struct Fleet {
    config: FleetConfig,
    sessions: BTreeMap<DroneId, Arc<DroneSession>>,
    telemetry: Option<TelemetryHub>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroneStatus {
    pub id: DroneId,
    pub address: SocketAddr,
    pub status: SessionStatus,
    pub commands_sent: u64,
    pub state: Option<StateReport>,
}

impl Fleet {
    /// Opens and handshakes every drone concurrently. Drones that fail the
    /// handshake stay in the fleet as Disconnected.
    pub async fn connect(config: FleetConfig, telemetry: Option<TelemetryHub>) -> Result<Self, LinkError> {
        let timeout = config.command_timeout();
        let mut sessions = BTreeMap::new();
        for entry in &config.entries {
            sessions.insert(entry.id, Arc::new(DroneSession::open(*entry, timeout).await?));
        }
        let handshakes = sessions.values().map(|s| {
            let s = s.clone();
            tokio::spawn(async move { (s.id(), s.handshake().await) })
        });
        for h in handshakes.collect::<Vec<_>>() {
            if let Ok((id, Err(e))) = h.await {
                tracing::warn!(drone = %id, error = %e, "drone not connected");
            }
        }
        Ok(Fleet { config, sessions, telemetry })
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }

    pub fn session(&self, id: DroneId) -> Option<&Arc<DroneSession>> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> &BTreeMap<DroneId, Arc<DroneSession>> {
        &self.sessions
    }

    pub fn telemetry(&self) -> Option<&TelemetryHub> {
        self.telemetry.as_ref()
    }

    /// Non-blocking snapshot of every drone.
    pub fn status(&self) -> Vec<DroneStatus> {
        self.sessions
            .values()
            .map(|s| DroneStatus {
                id: s.id(),
                address: s.address(),
                status: s.status(),
                commands_sent: s.commands_sent(),
                state: self.telemetry.as_ref().and_then(|t| t.latest(s.address())),
            })
            .collect()
    }

    /// Ids among `ids` whose session is not Ready.
    pub fn not_ready(&self, ids: impl IntoIterator<Item = DroneId>) -> Vec<DroneId> {
        ids.into_iter()
            .filter(|id| self.sessions.get(id).is_none_or(|s| s.status() != SessionStatus::Ready))
            .collect()
    }

    /// Re-handshakes every Disconnected drone.
    pub async fn reconnect(&self) {
        for s in self.sessions.values() {
            if s.status() == SessionStatus::Disconnected {
                let _ = s.handshake().await;
            }
        }
    }
}
