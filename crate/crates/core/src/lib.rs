//! Continuity-error synthesis and plot-hole detection evaluation.
//!
//! The crate is organised by stage:
//!
//! * [`text`] and [`model`]: sentence primitives and domain types.
//! * [`gateway`]: chat-model providers with retries, accounting and
//!   record/replay fixtures.
//! * [`prompt`]: stage templates and the parsers for their responses.
//! * [`pipeline`]: the story-editing pipeline that produces candidates.
//! * [`dataset`]: benchmark assembly, annotation ingestion and statistics.
//! * [`eval`]: detectors, the verifier loop, baselines and metrics.
//! * [`study`]: detection rates of generated versus original stories.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod study;
pub mod text;
