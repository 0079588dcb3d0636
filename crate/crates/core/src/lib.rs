//! Orchestration core for controlled crowdsourcing experiments.
//!
//! A workflow is a DAG of `Do` blocks (crowd tasks published on a platform)
//! and `Lambda` blocks (closed-vocabulary data transforms). The [`engine`]
//! executes runs under the crash-and-rerun model, the [`worker`] manager
//! decides who may take part and in which condition, the [`scheduler`]
//! gates collection to time windows, [`platform`] isolates crowd platforms
//! (including a deterministic simulated one) and [`analysis`] quantifies the
//! biases that appear when those controls are switched off.

pub mod analysis;
pub mod clock;
pub mod digest;
pub mod engine;
pub mod platform;
pub mod scheduler;
pub mod simulation;
pub mod store;
pub mod transform;
pub mod worker;
pub mod workflow;

pub use clock::{Clock, ManualClock, SystemClock};
pub use workflow::{BlockDef, BlockKind, DataUnit, ExperimentGroup, WorkflowDef};
