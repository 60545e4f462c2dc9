//! Core layers of the task orchestration stack.
//!
//! A task travels through four layers, each a module here:
//!
//! - [`schema`]: the task description format, validation against cluster
//!   limits, and the canonical form whose digest identifies a task.
//! - [`bundle`]: compiles a task and its workspace into a content-addressed
//!   bundle and computes delta uploads against a remote object index.
//! - [`sched`]: a pure decision engine (fair-share priority, EASY backfill,
//!   preemption, gang time-slicing, quotas).
//! - [`exec`]: execution backends, ranked backend selection and failover.
//!
//! The controller service and the CLI client live in their own crates and
//! wire these layers together.

pub mod bundle;
pub mod canonical;
pub mod digest;
pub mod error;
pub mod exec;
pub mod ids;
pub mod sched;
pub mod schema;

pub use digest::Digest;
pub use error::ErrorCode;
pub use ids::JobId;
