//! The restricted plan language emitted by the LLM.
//!
//! A plan is a straight-line program, one call per line:
//!
//! ```text
//! takeoff(1)
//! fly(1, right, 50)   # comments run to end of line
//! barrier()
//! takeoff(2)
//! ```
//!
//! Source goes through [`tokenize`], [`parse`] and [`validate_plan`] to
//! become a [`Plan`], which [`compile`] turns into per-drone queues with
//! rendezvous points. The set of callable functions is [`FUNCTIONS`]; the
//! prompt library preamble is generated from the same table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::motion::{
    self, validate_action, DroneAction, DroneId, FlipDirection, FlyDirection, Motion, RotateDirection,
    ValidationError,
};

pub const BARRIER: &str = "barrier";

/// Parameter types of the callable functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Drone,
    FlyDirection,
    FlipDirection,
    RotateDirection,
    DistanceCm,
    Degrees,
    Seconds,
}

impl ParamKind {
    /// Human-readable domain used in the prompt preamble.
    pub fn domain(self) -> String {
        fn words(all: &[impl fmt::Display]) -> String {
            all.iter().map(ToString::to_string).collect::<Vec<_>>().join("|")
        }
        match self {
            ParamKind::Drone => "drone id (integer >= 1)".to_string(),
            ParamKind::FlyDirection => words(FlyDirection::ALL),
            ParamKind::FlipDirection => words(FlipDirection::ALL),
            ParamKind::RotateDirection => words(RotateDirection::ALL),
            ParamKind::DistanceCm => format!("integer {}..{}", motion::MIN_DISTANCE_CM, motion::MAX_DISTANCE_CM),
            ParamKind::Degrees => format!("integer {}..{}", motion::MIN_DEGREES, motion::MAX_DEGREES),
            ParamKind::Seconds => format!(
                "decimal {}..{}, one decimal place",
                motion::format_deciseconds(motion::MIN_HOVER_DECIS),
                motion::format_deciseconds(motion::MAX_HOVER_DECIS)
            ),
        }
    }

    fn expects_word(self) -> bool {
        matches!(self, ParamKind::FlyDirection | ParamKind::FlipDirection | ParamKind::RotateDirection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
}

/// One entry of the callable-function whitelist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FunctionSpec {
    pub name: &'static str,
    pub params: &'static [ParamSpec],
    pub summary: &'static str,
}

const DRONE: ParamSpec = ParamSpec { name: "drone", kind: ParamKind::Drone };

/// Every function a plan may call, including `barrier`.
pub const FUNCTIONS: &[FunctionSpec] = &[
    FunctionSpec {
        name: "takeoff",
        params: &[DRONE],
        summary: "Take off and climb to the default hover altitude.",
    },
    FunctionSpec {
        name: "land",
        params: &[DRONE],
        summary: "Land at the current position.",
    },
    FunctionSpec {
        name: "fly",
        params: &[
            DRONE,
            ParamSpec { name: "direction", kind: ParamKind::FlyDirection },
            ParamSpec { name: "distance_cm", kind: ParamKind::DistanceCm },
        ],
        summary: "Fly in a straight line relative to the drone's own heading; up and down change altitude.",
    },
    FunctionSpec {
        name: "flip",
        params: &[DRONE, ParamSpec { name: "direction", kind: ParamKind::FlipDirection }],
        summary: "Perform a flip in the given direction without changing position.",
    },
    FunctionSpec {
        name: "rotate",
        params: &[
            DRONE,
            ParamSpec { name: "direction", kind: ParamKind::RotateDirection },
            ParamSpec { name: "degrees", kind: ParamKind::Degrees },
        ],
        summary: "Turn in place clockwise (cw) or counter-clockwise (ccw).",
    },
    FunctionSpec {
        name: "hover",
        params: &[DRONE, ParamSpec { name: "seconds", kind: ParamKind::Seconds }],
        summary: "Hold position for the given number of seconds.",
    },
    FunctionSpec {
        name: BARRIER,
        params: &[],
        summary: "Wait until every drone has finished all earlier actions before any drone continues.",
    },
];

pub fn lookup_function(name: &str) -> Option<&'static FunctionSpec> {
    FUNCTIONS.iter().find(|f| f.name == name)
}

/// Set of drone ids a plan may reference.
pub trait Roster {
    fn contains_drone(&self, id: DroneId) -> bool;
}

impl Roster for BTreeSet<DroneId> {
    fn contains_drone(&self, id: DroneId) -> bool {
        self.contains(&id)
    }
}

impl Roster for [DroneId] {
    fn contains_drone(&self, id: DroneId) -> bool {
        self.contains(&id)
    }
}

impl<const N: usize> Roster for [DroneId; N] {
    fn contains_drone(&self, id: DroneId) -> bool {
        self.contains(&id)
    }
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Ident(String),
    Int(u64),
    /// Decimal literal kept as written (`1.5`).
    Decimal(String),
    LParen,
    RParen,
    Comma,
    Newline,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Ident(s) => write!(f, "`{s}`"),
            TokenKind::Int(n) => write!(f, "`{n}`"),
            TokenKind::Decimal(s) => write!(f, "`{s}`"),
            TokenKind::LParen => f.write_str("`(`"),
            TokenKind::RParen => f.write_str("`)`"),
            TokenKind::Comma => f.write_str("`,`"),
            TokenKind::Newline => f.write_str("end of line"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: unexpected character {found:?}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub found: char,
}

/// Splits plan source into tokens. Comments and blank lines produce
/// nothing; a `Newline` token terminates every line that produced tokens.
pub fn tokenize(source: &str) -> Result<Vec<Token>, SyntaxError> {
    let mut tokens = Vec::new();
    let lines: Vec<&str> = source.split('\n').collect();
    for (line_idx, line) in lines.iter().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let line_no = line_idx + 1;
        let chars: Vec<char> = line.chars().collect();
        let start_len = tokens.len();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            let err = |at: usize| SyntaxError { line: line_no, column: at + 1, found: chars[at] };
            match c {
                '#' => break,
                c if c.is_whitespace() => i += 1,
                '(' | ')' | ',' => {
                    let kind = match c {
                        '(' => TokenKind::LParen,
                        ')' => TokenKind::RParen,
                        _ => TokenKind::Comma,
                    };
                    tokens.push(Token { kind, line: line_no, column });
                    i += 1;
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                        i += 1;
                    }
                    let text: String = chars[start..i].iter().collect();
                    tokens.push(Token { kind: TokenKind::Ident(text), line: line_no, column });
                }
                c if c.is_ascii_digit() => {
                    let start = i;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                    let mut decimal = false;
                    if i < chars.len() && chars[i] == '.' {
                        if i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
                            decimal = true;
                            i += 1;
                            while i < chars.len() && chars[i].is_ascii_digit() {
                                i += 1;
                            }
                        } else {
                            return Err(err(i));
                        }
                    }
                    if i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                        return Err(err(i));
                    }
                    let text: String = chars[start..i].iter().collect();
                    let kind = if decimal {
                        TokenKind::Decimal(text)
                    } else {
                        TokenKind::Int(text.parse().map_err(|_| err(start))?)
                    };
                    tokens.push(Token { kind, line: line_no, column });
                }
                _ => return Err(err(i)),
            }
        }
        // Blank and comment-only lines emit no Newline either.
        if tokens.len() > start_len && line_idx + 1 < lines.len() {
            tokens.push(Token { kind: TokenKind::Newline, line: line_no, column: chars.len() + 1 });
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Ident(String),
    Int(u64),
    Decimal(String),
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Ident(s) | ArgValue::Decimal(s) => f.write_str(s),
            ArgValue::Int(n) => write!(f, "{n}"),
        }
    }
}

/// A structurally valid line, not yet checked against the whitelist.
#[derive(Debug, Clone, PartialEq)]
pub enum RawStatement {
    Call { line: usize, name: String, args: Vec<ArgValue> },
    Barrier { line: usize },
}

impl RawStatement {
    pub fn line(&self) -> usize {
        match self {
            RawStatement::Call { line, .. } | RawStatement::Barrier { line } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: expected {expected}, found {found}")]
pub struct ParseError {
    pub line: usize,
    pub expected: String,
    pub found: String,
}

struct Cursor<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let tok = self.tokens.get(self.pos);
        self.pos += 1;
        tok
    }

    fn fail(&self, line: usize, expected: &str, found: Option<&Token>) -> ParseError {
        ParseError {
            line: found.map_or(line, |t| t.line),
            expected: expected.to_string(),
            found: found.map_or_else(|| "end of input".to_string(), |t| t.kind.to_string()),
        }
    }

    fn expect(&mut self, line: usize, want: &TokenKind, expected: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(t) if &t.kind == want => Ok(()),
            other => Err(self.fail(line, expected, other)),
        }
    }
}

/// Parses `ident '(' args? ')'` per line. Arguments are checked only for
/// shape (word or number).
pub fn parse(tokens: &[Token]) -> Result<Vec<RawStatement>, ParseError> {
    let mut cur = Cursor { tokens, pos: 0 };
    let mut out = Vec::new();
    while let Some(first) = cur.next() {
        let line = first.line;
        let name = match &first.kind {
            TokenKind::Newline => continue,
            TokenKind::Ident(name) => name.clone(),
            _ => return Err(cur.fail(line, "function name", Some(first))),
        };
        cur.expect(line, &TokenKind::LParen, "'('")?;
        let mut args = Vec::new();
        if matches!(cur.peek(), Some(Token { kind: TokenKind::RParen, .. })) {
            cur.next();
        } else {
            loop {
                let arg = match cur.next() {
                    Some(Token { kind: TokenKind::Ident(s), .. }) => ArgValue::Ident(s.clone()),
                    Some(Token { kind: TokenKind::Int(n), .. }) => ArgValue::Int(*n),
                    Some(Token { kind: TokenKind::Decimal(s), .. }) => ArgValue::Decimal(s.clone()),
                    other => return Err(cur.fail(line, "argument", other)),
                };
                args.push(arg);
                match cur.next() {
                    Some(Token { kind: TokenKind::Comma, .. }) => {}
                    Some(Token { kind: TokenKind::RParen, .. }) => break,
                    other => return Err(cur.fail(line, "',' or ')'", other)),
                }
            }
        }
        match cur.next() {
            None | Some(Token { kind: TokenKind::Newline, .. }) => {}
            other => return Err(cur.fail(line, "end of line", other)),
        }
        if name == BARRIER && args.is_empty() {
            out.push(RawStatement::Barrier { line });
        } else {
            out.push(RawStatement::Call { line, name, args });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    Action(DroneAction),
    Barrier,
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::Action(a) => a.fmt(f),
            Statement::Barrier => write!(f, "{BARRIER}()"),
        }
    }
}

/// A validated plan. Construct with [`validate_plan`] or [`parse_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    statements: Vec<Statement>,
    referenced_drones: BTreeSet<DroneId>,
}

impl Plan {
    pub fn statements(&self) -> &[Statement] {
        &self.statements
    }

    pub fn referenced_drones(&self) -> &BTreeSet<DroneId> {
        &self.referenced_drones
    }

    pub fn actions(&self) -> impl Iterator<Item = &DroneAction> {
        self.statements.iter().filter_map(|s| match s {
            Statement::Action(a) => Some(a),
            Statement::Barrier => None,
        })
    }

    /// Canonical source text: one statement per line.
    pub fn to_source(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.statements.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            s.fmt(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanErrorKind {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("`{name}` takes {expected} argument(s), got {got}")]
    ArityMismatch { name: String, expected: usize, got: usize },
    #[error("unknown drone {0}")]
    UnknownDrone(u64),
    #[error("argument `{param}` of `{name}` must be {expected}, got `{found}`")]
    ArgumentType { name: String, param: &'static str, expected: String, found: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("plan contains no actions")]
    EmptyPlan,
    #[error("misplaced barrier: {0}")]
    BarrierPlacement(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct PlanError {
    /// 0 for whole-plan errors.
    pub line: usize,
    pub kind: PlanErrorKind,
}

fn arg_to_u32(arg: &ArgValue) -> Option<u32> {
    match arg {
        ArgValue::Int(n) => u32::try_from(*n).ok(),
        _ => None,
    }
}

/// Parses a seconds literal with at most one fractional digit into tenths.
fn arg_to_deciseconds(arg: &ArgValue) -> Option<u32> {
    match arg {
        ArgValue::Int(n) => u32::try_from(*n).ok()?.checked_mul(10),
        ArgValue::Decimal(s) => {
            let (whole, frac) = s.split_once('.')?;
            if frac.len() != 1 {
                return None;
            }
            let whole: u32 = whole.parse().ok()?;
            let frac: u32 = frac.parse().ok()?;
            whole.checked_mul(10)?.checked_add(frac)
        }
        ArgValue::Ident(_) => None,
    }
}

fn resolve_call(
    spec: &FunctionSpec,
    args: &[ArgValue],
    roster: &(impl Roster + ?Sized),
) -> Result<DroneAction, Vec<PlanErrorKind>> {
    let mut errors = Vec::new();
    let type_error = |param: &ParamSpec, arg: &ArgValue| PlanErrorKind::ArgumentType {
        name: spec.name.to_string(),
        param: param.name,
        expected: param.kind.domain(),
        found: arg.to_string(),
    };

    // Shape check first so every malformed argument is reported.
    for (param, arg) in spec.params.iter().zip(args) {
        let is_word = matches!(arg, ArgValue::Ident(_));
        let ok_shape = match param.kind {
            k if k.expects_word() => is_word,
            ParamKind::Seconds => !is_word,
            _ => matches!(arg, ArgValue::Int(_)),
        };
        if !ok_shape {
            errors.push(type_error(param, arg));
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    let drone = match &args[0] {
        ArgValue::Int(n) => match u32::try_from(*n).ok().and_then(DroneId::new) {
            Some(id) if roster.contains_drone(id) => Some(id),
            _ => {
                errors.push(PlanErrorKind::UnknownDrone(*n));
                None
            }
        },
        _ => unreachable!("shape checked"),
    };

    let word = |i: usize| match &args[i] {
        ArgValue::Ident(s) => s.as_str(),
        _ => unreachable!("shape checked"),
    };
    let number = |i: usize| arg_to_u32(&args[i]).unwrap_or(u32::MAX);

    let motion: Result<Motion, PlanErrorKind> = match spec.name {
        "takeoff" => Ok(Motion::Takeoff),
        "land" => Ok(Motion::Land),
        "fly" => word(1)
            .parse::<FlyDirection>()
            .map(|direction| Motion::Fly { direction, distance_cm: number(2) })
            .map_err(Into::into),
        "flip" => word(1)
            .parse::<FlipDirection>()
            .map(|direction| Motion::Flip { direction })
            .map_err(Into::into),
        "rotate" => word(1)
            .parse::<RotateDirection>()
            .map(|direction| Motion::Rotate { direction, degrees: number(2) })
            .map_err(Into::into),
        "hover" => match arg_to_deciseconds(&args[1]) {
            Some(deciseconds) => Ok(Motion::Hover { deciseconds }),
            None => Err(type_error(&spec.params[1], &args[1])),
        },
        other => unreachable!("no motion for `{other}`"),
    };

    match (drone, motion) {
        (Some(drone), Ok(motion)) => match validate_action(DroneAction::new(drone, motion)) {
            Ok(action) => Ok(action),
            Err(e) => Err(vec![e.into()]),
        },
        (drone, motion) => {
            if let Err(e) = motion {
                errors.push(e);
            } else if let (None, Ok(m)) = (drone, motion) {
                // Range errors are still worth reporting with an unknown drone.
                if let Err(e) = validate_action(DroneAction::new(DroneId::new(1).unwrap(), m)) {
                    errors.push(e.into());
                }
            }
            Err(errors)
        }
    }
}

/// Checks every statement against the whitelist, the motion ranges and the
/// roster. All errors are collected rather than stopping at the first.
pub fn validate_plan(raw: &[RawStatement], roster: &(impl Roster + ?Sized)) -> Result<Plan, Vec<PlanError>> {
    let mut errors = Vec::new();
    let mut statements = Vec::with_capacity(raw.len());
    let mut referenced_drones = BTreeSet::new();

    for stmt in raw {
        let line = stmt.line();
        match stmt {
            RawStatement::Barrier { .. } => statements.push(Statement::Barrier),
            RawStatement::Call { name, args, .. } => {
                let Some(spec) = lookup_function(name) else {
                    errors.push(PlanError { line, kind: PlanErrorKind::UnknownFunction(name.clone()) });
                    continue;
                };
                if args.len() != spec.params.len() {
                    errors.push(PlanError {
                        line,
                        kind: PlanErrorKind::ArityMismatch {
                            name: name.clone(),
                            expected: spec.params.len(),
                            got: args.len(),
                        },
                    });
                    continue;
                }
                match resolve_call(spec, args, roster) {
                    Ok(action) => {
                        referenced_drones.insert(action.drone);
                        statements.push(Statement::Action(action));
                    }
                    Err(kinds) => errors.extend(kinds.into_iter().map(|kind| PlanError { line, kind })),
                }
            }
        }
    }

    if !raw.iter().any(|s| matches!(s, RawStatement::Call { .. })) {
        errors.push(PlanError { line: 0, kind: PlanErrorKind::EmptyPlan });
    }
    if let Some(RawStatement::Barrier { line }) = raw.first() {
        errors.push(PlanError { line: *line, kind: PlanErrorKind::BarrierPlacement("plan starts with a barrier") });
    }
    if raw.len() > 1 {
        if let Some(RawStatement::Barrier { line }) = raw.last() {
            errors.push(PlanError { line: *line, kind: PlanErrorKind::BarrierPlacement("plan ends with a barrier") });
        }
    }
    for pair in raw.windows(2) {
        if let [RawStatement::Barrier { .. }, RawStatement::Barrier { line }] = pair {
            errors.push(PlanError { line: *line, kind: PlanErrorKind::BarrierPlacement("two adjacent barriers") });
        }
    }

    if errors.is_empty() {
        Ok(Plan { statements, referenced_drones })
    } else {
        errors.sort_by_key(|e| e.line);
        Err(errors)
    }
}

/// Any failure on the way from source text to a [`Plan`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanSourceError {
    #[error("syntax error: {0}")]
    Syntax(#[from] SyntaxError),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("{}", format_plan_errors(.0))]
    Invalid(Vec<PlanError>),
}

pub fn format_plan_errors(errors: &[PlanError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl PlanSourceError {
    /// One message per problem, suitable for echoing back to the model.
    pub fn messages(&self) -> Vec<String> {
        match self {
            PlanSourceError::Invalid(errs) => errs.iter().map(ToString::to_string).collect(),
            other => vec![other.to_string()],
        }
    }
}

/// Tokenizes, parses and validates in one step.
pub fn parse_plan(source: &str, roster: &(impl Roster + ?Sized)) -> Result<Plan, PlanSourceError> {
    let tokens = tokenize(source)?;
    let raw = parse(&tokens)?;
    validate_plan(&raw, roster).map_err(PlanSourceError::Invalid)
}

// ---------------------------------------------------------------------------
// Compilation

/// Per-drone action queues with rendezvous points.
///
/// `barrier_points[d][k]` is the queue index before which drone `d` waits at
/// barrier `k`; a drone that has nothing to do in a segment still waits.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    queues: BTreeMap<DroneId, Vec<DroneAction>>,
    barrier_points: BTreeMap<DroneId, Vec<usize>>,
    barrier_count: usize,
}

impl Schedule {
    pub fn drones(&self) -> impl Iterator<Item = DroneId> + '_ {
        self.queues.keys().copied()
    }

    pub fn queues(&self) -> &BTreeMap<DroneId, Vec<DroneAction>> {
        &self.queues
    }

    pub fn queue(&self, drone: DroneId) -> &[DroneAction] {
        self.queues.get(&drone).map_or(&[], Vec::as_slice)
    }

    pub fn barrier_points(&self, drone: DroneId) -> &[usize] {
        self.barrier_points.get(&drone).map_or(&[], Vec::as_slice)
    }

    pub fn barrier_count(&self) -> usize {
        self.barrier_count
    }

    pub fn total_actions(&self) -> usize {
        self.queues.values().map(Vec::len).sum()
    }

    /// The drone's actions split at its barrier points; always
    /// `barrier_count() + 1` segments.
    pub fn segments(&self, drone: DroneId) -> Vec<&[DroneAction]> {
        let queue = self.queue(drone);
        let mut out = Vec::with_capacity(self.barrier_count + 1);
        let mut start = 0;
        for &point in self.barrier_points(drone) {
            out.push(&queue[start..point]);
            start = point;
        }
        out.push(&queue[start..]);
        out
    }
}

/// Partitions a plan into per-drone FIFO queues. Each barrier adds a
/// rendezvous point to every referenced drone's queue.
pub fn compile(plan: &Plan) -> Schedule {
    let mut queues: BTreeMap<DroneId, Vec<DroneAction>> =
        plan.referenced_drones.iter().map(|&d| (d, Vec::new())).collect();
    let mut barrier_points: BTreeMap<DroneId, Vec<usize>> =
        plan.referenced_drones.iter().map(|&d| (d, Vec::new())).collect();
    let mut barrier_count = 0;
    for stmt in &plan.statements {
        match stmt {
            Statement::Action(action) => queues.entry(action.drone).or_default().push(*action),
            Statement::Barrier => {
                barrier_count += 1;
                for (drone, points) in barrier_points.iter_mut() {
                    points.push(queues[drone].len());
                }
            }
        }
    }
    Schedule { queues, barrier_points, barrier_count }
}
