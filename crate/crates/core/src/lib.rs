//! Routed panel-of-experts triage over clinical event streams.
//!
//! The pipeline tokenizes episodes ([`event_schema`]), expands them into
//! anytime prefixes and featurizes them ([`prefix_features`]), scores them with
//! calibrated one-vs-rest heads ([`router`]), dispatches under a safety-first
//! policy ([`dispatch_policy`]) to compact next-event models
//! ([`specialist`]), and measures the result ([`eval_harness`]).
//! [`synth_cohort`] supplies seeded synthetic cohorts.

pub mod dispatch_policy;
pub mod error;
pub mod eval_harness;
pub mod event_schema;
pub mod linalg;
pub mod par;
pub mod prefix_features;
pub mod router;
pub mod specialist;
pub mod synth_cohort;

pub use error::{Error, Result};
pub use event_schema::{Domain, DomainSet};
