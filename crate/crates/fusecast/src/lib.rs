//! Event-aware traffic forecasting on road sensor graphs.
//!
//! The pipeline: a structured encoder summarizes recent speeds over the
//! sensor graph, a retrieval layer fetches short event descriptions around
//! each forecast window, a frozen text encoder embeds them, and a fusion
//! block (cross-attention by default) injects the event signal before the
//! decoder emits multi-horizon forecasts. Evaluation stratifies errors by
//! event impact so "better during disruptions" is measurable, not anecdotal.
//!
//! All learnable pieces run on a small f64 tape (see [`numerics`]) whose
//! gradients are verified against finite differences in the test suite.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod events;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod stenc;
pub mod study;
pub mod synth;
pub mod textenc;

pub use error::{Error, Result};
