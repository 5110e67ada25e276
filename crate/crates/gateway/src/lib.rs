//! Operator-facing service for llmfleet.
//!
//! A [`Gateway`] owns the fleet connection, the LLM backend and the
//! sessions. Each session turns a task into a pending plan, which flies
//! only after an explicit approve. [`http::router`] exposes the same
//! operations over HTTP and streams execution events over WebSocket.

pub mod config;
pub mod http;
pub mod service;
pub mod transcript;

pub use service::{Frame, Gateway, GatewayError, GatewayOptions, PlanPreview};
pub use transcript::{RecordKind, Transcript, TranscriptRecord};
