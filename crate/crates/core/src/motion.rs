//! The drone motion function library.
//!
//! A [`DroneAction`] is one validated command for one drone. The set of
//! motions is closed: takeoff, land, straight-line flight, flips, yaw
//! rotation and an executor-local hover. Parameter ranges follow the Tello
//! SDK 2.0 command set, which is also the wire format produced by
//! [`encode_action`].

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_DISTANCE_CM: u32 = 20;
pub const MAX_DISTANCE_CM: u32 = 500;
pub const MIN_DEGREES: u32 = 1;
pub const MAX_DEGREES: u32 = 360;
/// Hover bounds in tenths of a second (0.1 s .. 30.0 s).
pub const MIN_HOVER_DECIS: u32 = 1;
pub const MAX_HOVER_DECIS: u32 = 300;

/// Literal that switches a Tello into SDK mode.
pub const ENTER_SDK: &str = "command";
/// Battery query; the reply is a bare integer percentage.
pub const BATTERY_QUERY: &str = "battery?";

/// 1-based drone identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct DroneId(u32);

impl DroneId {
    pub fn new(id: u32) -> Option<Self> {
        (id >= 1).then_some(DroneId(id))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for DroneId {
    type Error = String;

    fn try_from(id: u32) -> Result<Self, Self::Error> {
        DroneId::new(id).ok_or_else(|| "drone ids start at 1".to_string())
    }
}

impl From<DroneId> for u32 {
    fn from(id: DroneId) -> u32 {
        id.0
    }
}

impl fmt::Display for DroneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! direction_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }
        }

        impl FromStr for $name {
            type Err = ValidationError;

            fn from_str(token: &str) -> Result<Self, Self::Err> {
                match token {
                    $($word => Ok($name::$variant),)+
                    other => Err(ValidationError::InvalidDirection(other.to_string())),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

direction_enum!(
    /// Straight-line flight direction, relative to the drone's body frame.
    FlyDirection {
        Left => "left",
        Right => "right",
        Forward => "forward",
        Back => "back",
        Up => "up",
        Down => "down",
    }
);

direction_enum!(FlipDirection {
    Left => "left",
    Right => "right",
    Forward => "forward",
    Back => "back",
});

direction_enum!(RotateDirection {
    Cw => "cw",
    Ccw => "ccw",
});

impl FlipDirection {
    /// Single-letter code used on the wire (`flip l`).
    pub fn wire_code(self) -> char {
        match self {
            FlipDirection::Left => 'l',
            FlipDirection::Right => 'r',
            FlipDirection::Forward => 'f',
            FlipDirection::Back => 'b',
        }
    }
}

/// The motion part of an action. Each variant carries exactly the
/// parameters of its kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Motion {
    Takeoff,
    Land,
    Fly {
        direction: FlyDirection,
        distance_cm: u32,
    },
    Flip {
        direction: FlipDirection,
    },
    Rotate {
        direction: RotateDirection,
        degrees: u32,
    },
    /// Duration in tenths of a second.
    Hover {
        deciseconds: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Takeoff,
    Land,
    Fly,
    Flip,
    Rotate,
    Hover,
}

impl Motion {
    pub fn kind(&self) -> ActionKind {
        match self {
            Motion::Takeoff => ActionKind::Takeoff,
            Motion::Land => ActionKind::Land,
            Motion::Fly { .. } => ActionKind::Fly,
            Motion::Flip { .. } => ActionKind::Flip,
            Motion::Rotate { .. } => ActionKind::Rotate,
            Motion::Hover { .. } => ActionKind::Hover,
        }
    }

    pub fn hover_duration(&self) -> Option<Duration> {
        match *self {
            Motion::Hover { deciseconds } => Some(Duration::from_millis(u64::from(deciseconds) * 100)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DroneAction {
    pub drone: DroneId,
    pub motion: Motion,
}

impl DroneAction {
    pub fn new(drone: DroneId, motion: Motion) -> Self {
        DroneAction { drone, motion }
    }

    pub fn kind(&self) -> ActionKind {
        self.motion.kind()
    }
}

/// Formats tenths of a second as a decimal with one fractional digit
/// (`15` -> `1.5`, `20` -> `2.0`).
pub fn format_deciseconds(deciseconds: u32) -> String {
    format!("{}.{}", deciseconds / 10, deciseconds % 10)
}

impl fmt::Display for DroneAction {
    /// Canonical plan-language form, e.g. `fly(1, left, 50)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id = self.drone;
        match self.motion {
            Motion::Takeoff => write!(f, "takeoff({id})"),
            Motion::Land => write!(f, "land({id})"),
            Motion::Fly { direction, distance_cm } => write!(f, "fly({id}, {direction}, {distance_cm})"),
            Motion::Flip { direction } => write!(f, "flip({id}, {direction})"),
            Motion::Rotate { direction, degrees } => write!(f, "rotate({id}, {direction}, {degrees})"),
            Motion::Hover { deciseconds } => write!(f, "hover({id}, {})", format_deciseconds(deciseconds)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("{field} = {value} is out of range [{min}, {max}]")]
    RangeViolation {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid direction `{0}`")]
    InvalidDirection(String),
}

fn check_range(field: &'static str, value: f64, min: f64, max: f64) -> Result<(), ValidationError> {
    if (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(ValidationError::RangeViolation { field, value, min, max })
    }
}

/// Returns the action unchanged iff every parameter is inside its allowed
/// range.
pub fn validate_action(action: DroneAction) -> Result<DroneAction, ValidationError> {
    match action.motion {
        Motion::Fly { distance_cm, .. } => check_range(
            "distance_cm",
            f64::from(distance_cm),
            f64::from(MIN_DISTANCE_CM),
            f64::from(MAX_DISTANCE_CM),
        )?,
        Motion::Rotate { degrees, .. } => check_range(
            "degrees",
            f64::from(degrees),
            f64::from(MIN_DEGREES),
            f64::from(MAX_DEGREES),
        )?,
        Motion::Hover { deciseconds } => check_range(
            "seconds",
            f64::from(deciseconds) / 10.0,
            f64::from(MIN_HOVER_DECIS) / 10.0,
            f64::from(MAX_HOVER_DECIS) / 10.0,
        )?,
        Motion::Takeoff | Motion::Land | Motion::Flip { .. } => {}
    }
    Ok(action)
}

/// Encodes a validated action as one Tello SDK command line. Hover has no
/// wire form and yields `None`.
pub fn encode_action(action: &DroneAction) -> Option<String> {
    let line = match action.motion {
        Motion::Takeoff => "takeoff".to_string(),
        Motion::Land => "land".to_string(),
        Motion::Fly { direction, distance_cm } => format!("{} {}", direction.as_str(), distance_cm),
        Motion::Flip { direction } => format!("flip {}", direction.wire_code()),
        Motion::Rotate { direction, degrees } => format!("{} {}", direction.as_str(), degrees),
        Motion::Hover { .. } => return None,
    };
    Some(line)
}

/// A drone's textual reply, classified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "value", rename_all = "lowercase")]
pub enum Reply {
    Ok,
    Error(String),
    Value(i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub reply: Reply,
    pub latency: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("empty response datagram")]
pub struct EmptyResponse;

/// Classifies a reply datagram. `ok` in any case is success, a decimal
/// integer is a query value, and any other non-empty text is an error.
pub fn decode_response(raw: &[u8]) -> Result<Reply, EmptyResponse> {
    let text = String::from_utf8_lossy(raw);
    let text = text.trim_matches(|c: char| c.is_whitespace() || c == '\0');
    if text.is_empty() {
        return Err(EmptyResponse);
    }
    if text.eq_ignore_ascii_case("ok") {
        return Ok(Reply::Ok);
    }
    if let Ok(n) = text.parse::<i64>() {
        return Ok(Reply::Value(n));
    }
    Ok(Reply::Error(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(n: u32) -> DroneId {
        DroneId::new(n).unwrap()
    }

    fn fly(drone: u32, direction: FlyDirection, distance_cm: u32) -> DroneAction {
        DroneAction::new(id(drone), Motion::Fly { direction, distance_cm })
    }

    #[test]
    fn drone_id_is_one_based() {
        assert!(DroneId::new(0).is_none());
        assert_eq!(DroneId::new(1).unwrap().get(), 1);
    }

    #[test]
    fn fly_left_fifty_is_valid() {
        let a = fly(1, FlyDirection::Left, 50);
        assert_eq!(validate_action(a), Ok(a));
    }

    #[test]
    fn fly_below_minimum_is_rejected() {
        let err = validate_action(fly(1, FlyDirection::Left, 10)).unwrap_err();
        assert_eq!(
            err,
            ValidationError::RangeViolation { field: "distance_cm", value: 10.0, min: 20.0, max: 500.0 }
        );
        assert_eq!(err.to_string(), "distance_cm = 10 is out of range [20, 500]");
    }

    #[test]
    fn rotate_zero_is_rejected() {
        let a = DroneAction::new(id(2), Motion::Rotate { direction: RotateDirection::Cw, degrees: 0 });
        assert_eq!(
            validate_action(a).unwrap_err(),
            ValidationError::RangeViolation { field: "degrees", value: 0.0, min: 1.0, max: 360.0 }
        );
    }

    #[test]
    fn hover_bounds() {
        let ok = DroneAction::new(id(1), Motion::Hover { deciseconds: 300 });
        assert!(validate_action(ok).is_ok());
        let too_long = DroneAction::new(id(1), Motion::Hover { deciseconds: 301 });
        assert!(matches!(
            validate_action(too_long),
            Err(ValidationError::RangeViolation { field: "seconds", .. })
        ));
        let zero = DroneAction::new(id(1), Motion::Hover { deciseconds: 0 });
        assert!(validate_action(zero).is_err());
    }

    #[test]
    fn bad_direction_token() {
        assert_eq!(
            "sideways".parse::<FlyDirection>(),
            Err(ValidationError::InvalidDirection("sideways".into()))
        );
        assert!("up".parse::<FlipDirection>().is_err());
    }

    #[test]
    fn wire_table() {
        assert_eq!(encode_action(&DroneAction::new(id(1), Motion::Takeoff)).unwrap(), "takeoff");
        assert_eq!(encode_action(&DroneAction::new(id(1), Motion::Land)).unwrap(), "land");
        assert_eq!(encode_action(&fly(1, FlyDirection::Left, 50)).unwrap(), "left 50");
        assert_eq!(encode_action(&fly(1, FlyDirection::Down, 20)).unwrap(), "down 20");
        let flip = DroneAction::new(id(1), Motion::Flip { direction: FlipDirection::Right });
        assert_eq!(encode_action(&flip).unwrap(), "flip r");
        let rot = DroneAction::new(id(2), Motion::Rotate { direction: RotateDirection::Ccw, degrees: 90 });
        assert_eq!(encode_action(&rot).unwrap(), "ccw 90");
        let hover = DroneAction::new(id(2), Motion::Hover { deciseconds: 15 });
        assert_eq!(encode_action(&hover), None);
    }

    #[test]
    fn canonical_text() {
        let hover = DroneAction::new(id(2), Motion::Hover { deciseconds: 15 });
        assert_eq!(hover.to_string(), "hover(2, 1.5)");
        assert_eq!(fly(1, FlyDirection::Forward, 50).to_string(), "fly(1, forward, 50)");
    }

    #[test]
    fn decode_replies() {
        assert_eq!(decode_response(b"ok"), Ok(Reply::Ok));
        assert_eq!(decode_response(b" OK\r\n"), Ok(Reply::Ok));
        assert_eq!(decode_response(b"error"), Ok(Reply::Error("error".into())));
        assert_eq!(decode_response(b"87"), Ok(Reply::Value(87)));
        assert_eq!(decode_response(b"-3"), Ok(Reply::Value(-3)));
        assert_eq!(decode_response(b"  \n"), Err(EmptyResponse));
        assert_eq!(decode_response(b""), Err(EmptyResponse));
    }

    fn any_motion() -> impl Strategy<Value = Motion> {
        prop_oneof![
            Just(Motion::Takeoff),
            Just(Motion::Land),
            (prop::sample::select(FlyDirection::ALL), 0u32..700)
                .prop_map(|(direction, distance_cm)| Motion::Fly { direction, distance_cm }),
            prop::sample::select(FlipDirection::ALL).prop_map(|direction| Motion::Flip { direction }),
            (prop::sample::select(RotateDirection::ALL), 0u32..400)
                .prop_map(|(direction, degrees)| Motion::Rotate { direction, degrees }),
            (0u32..400).prop_map(|deciseconds| Motion::Hover { deciseconds }),
        ]
    }

    proptest! {
        #[test]
        fn validation_is_pure_and_encoding_is_printable(motion in any_motion(), drone in 1u32..10) {
            let action = DroneAction::new(id(drone), motion);
            let first = validate_action(action);
            prop_assert_eq!(&first, &validate_action(action));
            if let Ok(valid) = first {
                prop_assert_eq!(valid, action);
                if let Some(line) = encode_action(&valid) {
                    prop_assert!(line.bytes().all(|b| (0x20..0x7f).contains(&b)));
                    prop_assert!(!line.contains("  "));
                    prop_assert!(!line.starts_with(' ') && !line.ends_with(' '));
                }
            }
        }

        #[test]
        fn decode_is_total(raw in prop::collection::vec(any::<u8>(), 0..32)) {
            match decode_response(&raw) {
                Err(EmptyResponse) => {
                    let text = String::from_utf8_lossy(&raw);
                    prop_assert!(text.trim_matches(|c: char| c.is_whitespace() || c == '\0').is_empty());
                }
                Ok(Reply::Error(msg)) => prop_assert!(!msg.is_empty()),
                Ok(_) => {}
            }
        }
    }
}
