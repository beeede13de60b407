//! Matched observational studies over a hierarchy of exposure definitions.
//!
//! The crate covers the whole protocol: exposure assignment on a tree of
//! nested exposure definitions, significance-level allocation that controls
//! the family-wise error rate under gated testing, propensity-score trimming,
//! optimal full matching on a rank-based Mahalanobis distance with a
//! propensity caliper, balance diagnostics, randomization inference with
//! Huber-type m-statistics, and a Monte Carlo harness that checks the
//! statistical guarantees on synthetic cohorts.

pub mod balance;
pub mod cohort;
pub mod distance;
pub mod error;
pub mod fullmatch;
pub mod hypotree;
pub mod inference;
pub mod pipeline;
pub mod propensity;
pub mod report;
pub mod simharness;

pub use error::{Error, Result};
