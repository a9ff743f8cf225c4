//! Trace-driven resilience testing for microservice systems.
//!
//! The pipeline records traces from a deterministic simulator, turns them
//! into replayable templates, picks high-complexity interfaces, plans
//! application-level fault injections over pruned targets, schedules them
//! into startup-amortized runs and verdicts each test with a phase-based,
//! two-level oracle.

pub mod aggregation;
pub mod campaign;
pub mod digest;
pub mod executor;
pub mod fault_catalog;
pub mod scheduler;
pub mod selection;
pub mod sim;
pub mod target_planner;
pub mod templating;
pub mod trace_model;

pub use trace_model::{Component, Corpus, Endpoint, Payload, Span, SpanStatus, Trace};
