//! Core of a human-in-the-loop grading platform.
//!
//! Scores are exact rationals throughout. Model calls go through
//! [`provider::Gateway`], which adds retries, a parallelism bound and an
//! idempotency cache in front of any [`provider::Provider`].

pub mod analytics;
pub mod calibration;
pub mod canonical;
pub mod domain;
pub mod exact;
pub mod ids;
pub mod ingestion;
pub mod mc;
pub mod pipeline;
pub mod provider;
pub mod review;
pub mod rubric;
pub mod store;

pub use exact::{Exact, Points};
