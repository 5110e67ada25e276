//! Prompt-driven task planning and execution for drone fleets.
//!
//! The pipeline runs left to right through the modules:
//!
//! * [`motion`] is the closed library of drone actions and their Tello
//!   wire encoding.
//! * [`prompt`] renders the system prompt, the function-library preamble
//!   and the conversation sent to the model.
//! * [`llm`] talks to a chat-completion backend, pulls code out of the
//!   reply and runs the bounded repair loop.
//! * [`dsl`] tokenizes, parses and validates the plan language and
//!   compiles a plan into per-drone queues.
//! * [`link`] holds the per-drone UDP sessions and telemetry listener.
//! * [`exec`] runs a compiled schedule over live sessions with barrier
//!   rendezvous and abort-and-land.
//! * [`sim`] is a virtual Tello fleet speaking the same protocol.

pub mod dsl;
pub mod exec;
pub mod link;
pub mod llm;
pub mod motion;
pub mod prompt;
pub mod sim;

pub use dsl::{compile, parse_plan, Plan, Schedule, Statement};
pub use motion::{DroneAction, DroneId, Motion};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/plan-language.md")]
    mod plan_language {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/wire-protocol.md")]
    mod wire_protocol {}
    #[doc = include_str!("../../../book/src/execution.md")]
    mod execution {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
}
