//! Numerical toolkit for instance-aware segmentation losses, a toy gated
//! hierarchical classifier, correlation-based uncertainty scoring, and
//! detection metrics — all exercised on deterministic synthetic scenes.
//!
//! The crate is organized as a pipeline:
//!
//! * [`synthgen`] builds synthetic disc scenes and toy feature datasets;
//! * [`instances`] extracts connected components and bounding boxes;
//! * [`losses`] evaluates segmentation losses with analytic gradients and
//!   fits logit maps directly by gradient descent;
//! * [`hier`] trains the dual-branch hierarchical classifier with feature
//!   apportionment;
//! * [`uncertainty`] scores samples by the disagreement between two
//!   probability readouts and reconstitutes training pools;
//! * [`eval`] computes Dice/accuracy/AP metrics, runs the two-stage
//!   detection pipeline, and provides a rank-sum significance test.
//!
//! Everything is seeded explicitly and single-threaded: two runs with the
//! same inputs produce byte-identical outputs.

pub mod error;
pub mod eval;
pub mod hier;
pub mod instances;
pub mod losses;
pub mod pixmap;
pub mod synthgen;
pub mod uncertainty;

pub use error::{Error, Result};
