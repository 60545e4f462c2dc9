//! The controller service: accepts submissions over the wire protocol, keeps
//! job state as a fold over an append-only event log, runs the scheduler
//! every tick and supervises tasks on the execution backends.

pub mod config;
pub mod controller;
pub mod eventlog;
pub mod harness;
pub mod logs;
pub mod server;
pub mod state;

pub use config::Config;
pub use controller::{Controller, CtlError, TickReport};
pub use state::{ApplyError, ControllerState, Event, EventKind, JobRecord, JobState};
