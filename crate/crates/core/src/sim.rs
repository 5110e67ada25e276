//! A virtual Tello fleet.
//!
//! Each simulated drone binds a UDP socket, answers the SDK text commands
//! with `ok`/`error`/a value after a simulated maneuver time, and streams
//! `key:value;` telemetry to an optional sink. [`apply_command`] is the
//! pure state transition; [`spawn_fleet`] wires it to sockets.
//!
//! World frame: x right, y forward, z up, in integer centimetres from the
//! start point. Heading is in degrees, 0 facing +y, clockwise positive.

use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket as StdUdpSocket};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::task::JoinHandle;

use crate::motion::{self, FlipDirection, FlyDirection, Motion, RotateDirection};

/// Maneuver timing and geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Kinematics {
    pub linear_cm_per_s: f64,
    pub angular_deg_per_s: f64,
    pub takeoff_s: f64,
    pub land_s: f64,
    pub flip_s: f64,
    pub takeoff_altitude_cm: i32,
}

impl Default for Kinematics {
    fn default() -> Self {
        Kinematics {
            linear_cm_per_s: 50.0,
            angular_deg_per_s: 90.0,
            takeoff_s: 2.0,
            land_s: 2.0,
            flip_s: 1.0,
            takeoff_altitude_cm: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Position {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Position { x, y, z }
    }
}

/// Ground truth for one simulated drone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimDroneState {
    pub position: Position,
    /// Degrees in [0, 360).
    pub heading: u32,
    pub airborne: bool,
    pub battery: u8,
    /// Total simulated maneuver time.
    pub maneuver_ms: u64,
    // Unrounded horizontal position; `position` is its nearest-cm view.
    #[serde(skip)]
    exact_x: f64,
    #[serde(skip)]
    exact_y: f64,
}

impl Default for SimDroneState {
    fn default() -> Self {
        SimDroneState {
            position: Position::default(),
            heading: 0,
            airborne: false,
            battery: 100,
            maneuver_ms: 0,
            exact_x: 0.0,
            exact_y: 0.0,
        }
    }
}

impl SimDroneState {
    /// An airborne drone at `position` (z > 0) facing `heading`.
    pub fn hovering(position: Position, heading: u32) -> Self {
        SimDroneState {
            position,
            heading: heading % 360,
            airborne: true,
            exact_x: f64::from(position.x),
            exact_y: f64::from(position.y),
            ..Default::default()
        }
    }

    /// Telemetry datagram in the Tello state format.
    pub fn telemetry_line(&self) -> String {
        format!(
            "pitch:0;roll:0;yaw:{};vgx:0;vgy:0;vgz:0;h:{};bat:{};time:{};",
            signed_yaw(self.heading),
            self.position.z,
            self.battery,
            self.maneuver_ms / 1000
        )
    }
}

/// Tello reports yaw in (-180, 180].
fn signed_yaw(heading: u32) -> i32 {
    let h = heading as i32;
    if h > 180 {
        h - 360
    } else {
        h
    }
}

/// A line of the wire protocol as understood by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimCommand {
    EnterSdk,
    BatteryQuery,
    Motion(Motion),
}

/// Parses one command line. Out-of-range magnitudes are rejected like a
/// real drone would.
pub fn parse_command(line: &str) -> Option<SimCommand> {
    let words: Vec<&str> = line.trim().split(' ').collect();
    let magnitude = |s: &str, min: u32, max: u32| s.parse::<u32>().ok().filter(|n| (min..=max).contains(n));
    let cmd = match words.as_slice() {
        [w] if *w == motion::ENTER_SDK => SimCommand::EnterSdk,
        [w] if *w == motion::BATTERY_QUERY => SimCommand::BatteryQuery,
        ["takeoff"] => SimCommand::Motion(Motion::Takeoff),
        ["land"] => SimCommand::Motion(Motion::Land),
        ["flip", code] => {
            let direction = match *code {
                "l" => FlipDirection::Left,
                "r" => FlipDirection::Right,
                "f" => FlipDirection::Forward,
                "b" => FlipDirection::Back,
                _ => return None,
            };
            SimCommand::Motion(Motion::Flip { direction })
        }
        [dir @ ("cw" | "ccw"), n] => {
            let direction = if *dir == "cw" { RotateDirection::Cw } else { RotateDirection::Ccw };
            let degrees = magnitude(n, motion::MIN_DEGREES, motion::MAX_DEGREES)?;
            SimCommand::Motion(Motion::Rotate { direction, degrees })
        }
        [dir, n] => {
            let direction = match *dir {
                "left" => FlyDirection::Left,
                "right" => FlyDirection::Right,
                "forward" => FlyDirection::Forward,
                "back" => FlyDirection::Back,
                "up" => FlyDirection::Up,
                "down" => FlyDirection::Down,
                _ => return None,
            };
            let distance_cm = magnitude(n, motion::MIN_DISTANCE_CM, motion::MAX_DISTANCE_CM)?;
            SimCommand::Motion(Motion::Fly { direction, distance_cm })
        }
        _ => return None,
    };
    Some(cmd)
}

/// (sin, cos) of a heading, exact at multiples of 90 degrees.
fn heading_basis(heading: u32) -> (f64, f64) {
    match heading % 360 {
        0 => (0.0, 1.0),
        90 => (1.0, 0.0),
        180 => (0.0, -1.0),
        270 => (-1.0, 0.0),
        h => f64::from(h).to_radians().sin_cos(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub state: SimDroneState,
    pub reply: String,
    pub duration: Duration,
}

const OK: &str = "ok";
const ERROR: &str = "error";

/// Applies one command line to a drone state.
///
/// Motion commands need the drone airborne (takeoff needs it landed), and
/// `down` may not reach the ground; any violation or unparseable line
/// replies `error` and leaves the state untouched. `land` while landed is an
/// idempotent `ok`. Battery drops 1% per 10 s of accumulated maneuver time.
pub fn apply_command(state: &SimDroneState, line: &str, kin: &Kinematics) -> Applied {
    let reject = || Applied { state: *state, reply: ERROR.to_string(), duration: Duration::ZERO };
    let Some(cmd) = parse_command(line) else {
        return reject();
    };
    let mut next = *state;
    let seconds = match cmd {
        SimCommand::EnterSdk => 0.0,
        SimCommand::BatteryQuery => {
            return Applied { state: *state, reply: state.battery.to_string(), duration: Duration::ZERO };
        }
        SimCommand::Motion(Motion::Takeoff) => {
            if state.airborne {
                return reject();
            }
            next.airborne = true;
            next.position.z = kin.takeoff_altitude_cm;
            kin.takeoff_s
        }
        SimCommand::Motion(Motion::Land) => {
            if !state.airborne {
                return Applied { state: *state, reply: OK.to_string(), duration: Duration::ZERO };
            }
            next.airborne = false;
            next.position.z = 0;
            kin.land_s
        }
        SimCommand::Motion(_) if !state.airborne => return reject(),
        SimCommand::Motion(Motion::Flip { .. }) => kin.flip_s,
        SimCommand::Motion(Motion::Rotate { direction, degrees }) => {
            let delta = match direction {
                RotateDirection::Cw => degrees as i64,
                RotateDirection::Ccw => -(degrees as i64),
            };
            next.heading = (i64::from(state.heading) + delta).rem_euclid(360) as u32;
            f64::from(degrees) / kin.angular_deg_per_s
        }
        SimCommand::Motion(Motion::Fly { direction, distance_cm }) => {
            let d = f64::from(distance_cm);
            let (sin, cos) = heading_basis(state.heading);
            // Body-frame unit vectors in world coordinates.
            let forward = (sin, cos);
            let right = (cos, -sin);
            let (dx, dy, dz) = match direction {
                FlyDirection::Forward => (forward.0 * d, forward.1 * d, 0),
                FlyDirection::Back => (-forward.0 * d, -forward.1 * d, 0),
                FlyDirection::Right => (right.0 * d, right.1 * d, 0),
                FlyDirection::Left => (-right.0 * d, -right.1 * d, 0),
                FlyDirection::Up => (0.0, 0.0, distance_cm as i32),
                FlyDirection::Down => (0.0, 0.0, -(distance_cm as i32)),
            };
            if state.position.z + dz <= 0 {
                return reject();
            }
            next.exact_x += dx;
            next.exact_y += dy;
            next.position.x = next.exact_x.round() as i32;
            next.position.y = next.exact_y.round() as i32;
            next.position.z += dz;
            d / kin.linear_cm_per_s
        }
        SimCommand::Motion(Motion::Hover { .. }) => unreachable!("hover has no wire form"),
    };
    let duration = Duration::from_secs_f64(seconds);
    next.maneuver_ms = state.maneuver_ms + duration.as_millis() as u64;
    next.battery = 100u64.saturating_sub(next.maneuver_ms / 10_000).min(u64::from(state.battery)) as u8;
    Applied { state: next, reply: OK.to_string(), duration }
}

// ---------------------------------------------------------------------------
// Faults

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Apply the command but never reply.
    DropReply,
    /// Reply `error` without applying the command.
    ReplyError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub drone: u32,
    /// 1-based ordinal over every datagram the drone receives, handshake
    /// included.
    pub command: u32,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScript {
    #[serde(default, rename = "fault")]
    pub faults: Vec<FaultEntry>,
}

impl FaultScript {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn lookup(&self, drone: u32, ordinal: u32) -> Option<FaultKind> {
        self.faults.iter().find(|f| f.drone == drone && f.command == ordinal).map(|f| f.kind)
    }
}

/// What the drone does with one received command, after faults.
#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub state: SimDroneState,
    pub reply: Option<String>,
    pub duration: Duration,
}

/// Runs a command through the fault script and the kinematics model.
pub fn run_fault(fault: Option<FaultKind>, state: &SimDroneState, line: &str, kin: &Kinematics) -> Effect {
    match fault {
        Some(FaultKind::ReplyError) => {
            Effect { state: *state, reply: Some(ERROR.to_string()), duration: Duration::ZERO }
        }
        Some(FaultKind::DropReply) => {
            let applied = apply_command(state, line, kin);
            Effect { state: applied.state, reply: None, duration: applied.duration }
        }
        None => {
            let applied = apply_command(state, line, kin);
            Effect { state: applied.state, reply: Some(applied.reply), duration: applied.duration }
        }
    }
}

// ---------------------------------------------------------------------------
// Running fleet

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDroneSpec {
    pub id: u32,
    pub bind: SocketAddr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub drones: Vec<SimDroneSpec>,
    /// 1.0 is real time; 0.01 runs a 2 s maneuver in 20 ms.
    pub time_scale: f64,
    pub faults: FaultScript,
    pub kinematics: Kinematics,
    pub telemetry_sink: Option<SocketAddr>,
    /// Unscaled telemetry period.
    pub telemetry_interval: Duration,
}

impl SimConfig {
    /// `count` drones on loopback. With `base_port == 0` every drone gets an
    /// ephemeral port; otherwise ports are `base_port + i`.
    pub fn loopback(count: u32, base_port: u16, time_scale: f64) -> Self {
        let drones = (1..=count)
            .map(|id| {
                let port = if base_port == 0 { 0 } else { base_port + (id as u16 - 1) };
                SimDroneSpec { id, bind: SocketAddr::from(([127, 0, 0, 1], port)) }
            })
            .collect();
        SimConfig {
            drones,
            time_scale,
            faults: FaultScript::default(),
            kinematics: Kinematics::default(),
            telemetry_sink: None,
            telemetry_interval: Duration::from_millis(100),
        }
    }

    pub fn with_faults(mut self, faults: FaultScript) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_telemetry_sink(mut self, sink: SocketAddr) -> Self {
        self.telemetry_sink = Some(sink);
        self
    }

    fn scaled(&self, d: Duration) -> Duration {
        d.mul_f64(self.time_scale)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot bind simulated drone to {address}: {source}")]
    BindFailure { address: SocketAddr, source: std::io::Error },
    #[error("time_scale must be positive, got {0}")]
    TimeScale(f64),
    #[error("duplicate simulated drone id {0}")]
    DuplicateId(u32),
}

struct SimDrone {
    address: SocketAddr,
    state: Arc<Mutex<SimDroneState>>,
    received: Arc<Mutex<Vec<String>>>,
}

/// Handle to a running fleet. Dropping it stops every drone.
pub struct SimFleet {
    drones: BTreeMap<u32, SimDrone>,
    tasks: Vec<JoinHandle<()>>,
}

impl SimFleet {
    pub fn address(&self, id: u32) -> Option<SocketAddr> {
        self.drones.get(&id).map(|d| d.address)
    }

    pub fn addresses(&self) -> BTreeMap<u32, SocketAddr> {
        self.drones.iter().map(|(id, d)| (*id, d.address)).collect()
    }

    /// Current state of every drone.
    pub fn snapshot(&self) -> BTreeMap<u32, SimDroneState> {
        self.drones.iter().map(|(id, d)| (*id, *d.state.lock().unwrap())).collect()
    }

    pub fn state(&self, id: u32) -> Option<SimDroneState> {
        self.drones.get(&id).map(|d| *d.state.lock().unwrap())
    }

    /// Every datagram the drone has received, in order.
    pub fn received(&self, id: u32) -> Vec<String> {
        self.drones.get(&id).map(|d| d.received.lock().unwrap().clone()).unwrap_or_default()
    }

    pub fn shutdown(&mut self) {
        for task in self.tasks.drain(..) {
            task.abort();
        }
    }
}

impl Drop for SimFleet {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds every drone and starts serving. Must be called inside a Tokio
/// runtime.
pub async fn spawn_fleet(config: SimConfig) -> Result<SimFleet, SimError> {
    if !(config.time_scale > 0.0 && config.time_scale.is_finite()) {
        return Err(SimError::TimeScale(config.time_scale));
    }
    let mut sockets = Vec::with_capacity(config.drones.len());
    for spec in &config.drones {
        if sockets.iter().any(|(id, _): &(u32, StdUdpSocket)| *id == spec.id) {
            return Err(SimError::DuplicateId(spec.id));
        }
        let bind_err = |source| SimError::BindFailure { address: spec.bind, source };
        let socket = StdUdpSocket::bind(spec.bind).map_err(bind_err)?;
        socket.set_nonblocking(true).map_err(bind_err)?;
        sockets.push((spec.id, socket));
    }

    let config = Arc::new(config);
    let mut drones = BTreeMap::new();
    let mut tasks = Vec::new();
    for (id, socket) in sockets {
        let address = socket.local_addr().map_err(|source| SimError::BindFailure { address: address_of(&config, id), source })?;
        let socket = Arc::new(
            UdpSocket::from_std(socket).map_err(|source| SimError::BindFailure { address, source })?,
        );
        let state = Arc::new(Mutex::new(SimDroneState::default()));
        let received = Arc::new(Mutex::new(Vec::new()));
        tasks.push(tokio::spawn(serve_drone(id, socket.clone(), state.clone(), received.clone(), config.clone())));
        if let Some(sink) = config.telemetry_sink {
            tasks.push(tokio::spawn(emit_telemetry(socket, sink, state.clone(), config.clone())));
        }
        drones.insert(id, SimDrone { address, state, received });
    }
    Ok(SimFleet { drones, tasks })
}

fn address_of(config: &SimConfig, id: u32) -> SocketAddr {
    config.drones.iter().find(|d| d.id == id).map(|d| d.bind).expect("configured drone")
}

async fn serve_drone(
    id: u32,
    socket: Arc<UdpSocket>,
    state: Arc<Mutex<SimDroneState>>,
    received: Arc<Mutex<Vec<String>>>,
    config: Arc<SimConfig>,
) {
    let mut buf = [0u8; 1024];
    let mut ordinal = 0u32;
    loop {
        let (n, peer) = match socket.recv_from(&mut buf).await {
            Ok(x) => x,
            // ICMP errors from earlier sends surface here on some platforms.
            Err(_) => continue,
        };
        ordinal += 1;
        let line = String::from_utf8_lossy(&buf[..n]).trim().to_string();
        received.lock().unwrap().push(line.clone());
        let current = *state.lock().unwrap();
        let effect = run_fault(config.faults.lookup(id, ordinal), &current, &line, &config.kinematics);
        tracing::debug!(drone = id, %line, reply = ?effect.reply, "sim command");
        if !effect.duration.is_zero() {
            tokio::time::sleep(config.scaled(effect.duration)).await;
        }
        *state.lock().unwrap() = effect.state;
        if let Some(reply) = effect.reply {
            let _ = socket.send_to(reply.as_bytes(), peer).await;
        }
    }
}

async fn emit_telemetry(
    socket: Arc<UdpSocket>,
    sink: SocketAddr,
    state: Arc<Mutex<SimDroneState>>,
    config: Arc<SimConfig>,
) {
    let period = config.scaled(config.telemetry_interval).max(Duration::from_millis(1));
    let mut ticker = tokio::time::interval(period);
    loop {
        ticker.tick().await;
        let line = state.lock().unwrap().telemetry_line();
        let _ = socket.send_to(line.as_bytes(), sink).await;
    }
}
