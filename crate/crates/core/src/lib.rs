//! Class-incremental learning with a frozen backbone, per-task residual
//! adapters, and a two-step prototype classifier.
//!
//! Each incremental task trains its own bottleneck adapter under a
//! cross-entropy plus center loss, then stores two prototypes per class:
//! one from the frozen backbone ("raw") and one through the task's adapter
//! ("augmented"). At test time the raw prototypes shortlist the `K` most
//! similar classes, and each candidate is rescored against its augmented
//! prototype using the adapter of the task it came from.

pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod prototypes;
pub mod training;

pub use error::{Error, Result};
