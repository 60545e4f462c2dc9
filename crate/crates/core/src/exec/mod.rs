//! Execution layer: backends that run materialized bundles, ranked backend
//! selection, and fail-safe switching between backends.
//!
//! Two backends ship here. [`LocalProcessBackend`] runs each rank's
//! entrypoint as an OS process group on the controller host.
//! [`SimulatedBackend`] is a deterministic virtual cluster driven by a
//! script bundled with the task, used for scheduler and failover testing.

mod local;
mod registry;
mod simulated;

pub use local::LocalProcessBackend;
pub use registry::{
    guess_language, FactorRecord, Layer, Registry, FACTOR_FAILOVER, FACTOR_REGISTRY_ORDER, FACTOR_RUNTIME,
    FACTOR_STATIC, FACTOR_USER_PREFERENCE, RuntimeChars, SelectionRules, SelectionTrace, StaticChars,
};
pub use simulated::{SimAction, SimScript, SimStep, SimulatedBackend, SIM_SCRIPT_PATH};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bundle::{BundleManifest, ObjectStore};
use crate::error::ErrorCode;
use crate::ids::JobId;
use crate::schema::{ResourceReq, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LocalProcess,
    Simulated,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::LocalProcess => "local_process",
            BackendKind::Simulated => "simulated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Up,
    Down,
}

/// Feature flag required by jobs spanning more than one node.
pub const FEATURE_MULTI_NODE: &str = "multi_node";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Largest per-node request the backend accepts.
    pub max: ResourceReq,
    pub features: BTreeSet<String>,
}

impl Capabilities {
    pub fn supports(&self, spec: &TaskSpec) -> bool {
        spec.resources.fits_within(&self.max) && (spec.nodes <= 1 || self.features.contains(FEATURE_MULTI_NODE))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    pub capabilities: Capabilities,
    pub health: Health,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHandle {
    pub job_id: JobId,
    pub backend: String,
    /// One runner per allocated node, in rank order.
    pub runners: Vec<String>,
    pub start_time_s: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogStream {
    Stdout,
    Stderr,
}

impl LogStream {
    pub fn as_str(&self) -> &'static str {
        match self {
            LogStream::Stdout => "stdout",
            LogStream::Stderr => "stderr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskEventKind {
    Started,
    LogLine { stream: LogStream, text: String },
    Exited { code: i32 },
    Failed { cause: String },
}

impl TaskEventKind {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskEventKind::Exited { .. } | TaskEventKind::Failed { .. })
    }
}

/// A per-rank event. `seq` increases by one per event within a rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub job_id: JobId,
    pub rank: u32,
    pub seq: u64,
    /// Milliseconds on the backend's clock.
    pub ts_ms: u64,
    #[serde(flatten)]
    pub kind: TaskEventKind,
}

pub struct ProvisionRequest<'a> {
    pub job_id: JobId,
    pub spec: &'a TaskSpec,
    pub manifest: &'a BundleManifest,
    pub store: &'a dyn ObjectStore,
    /// Node names in rank order.
    pub placement: Vec<String>,
    /// Extra variables on top of the spec's own `env`.
    pub env: BTreeMap<String, String>,
    pub now_s: u64,
}

impl ProvisionRequest<'_> {
    /// The complete environment for `rank`.
    pub fn rank_env(&self, rank: usize) -> BTreeMap<String, String> {
        let mut env = self.spec.env.clone();
        env.extend(self.env.clone());
        env.insert("TACC_JOB_ID".into(), self.job_id.to_string());
        env.insert("TACC_NODE_RANK".into(), rank.to_string());
        env.insert("TACC_NNODES".into(), self.placement.len().to_string());
        env.insert("TACC_NODELIST".into(), self.placement.join(","));
        env
    }
}

/// Acknowledgment of a stop request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreemptAck {
    /// True if every rank had already terminated.
    pub already_exited: bool,
    /// Seconds the job was actively running.
    pub active_s: f64,
    pub cpu_seconds: f64,
    pub gpu_seconds: f64,
}

impl PreemptAck {
    pub fn new(already_exited: bool, active_s: f64, per_node: &ResourceReq, nodes: usize) -> Self {
        PreemptAck {
            already_exited,
            active_s,
            cpu_seconds: active_s * f64::from(per_node.cpus) * nodes as f64,
            gpu_seconds: active_s * f64::from(per_node.gpus) * nodes as f64,
        }
    }
}

/// A file retrieved from a rank's working directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchedFile {
    pub rank: u32,
    /// Relative to the rank's working directory.
    pub path: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("PROVISION_FAILED on {node}: {cause}")]
    ProvisionFailed { node: String, cause: String },
    #[error("BACKEND_UNAVAILABLE: {0}")]
    BackendUnavailable(String),
    #[error("unknown task handle for job {0}")]
    UnknownHandle(JobId),
    #[error("bad pattern: {0}")]
    Pattern(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExecError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ExecError::ProvisionFailed { .. } => ErrorCode::ProvisionFailed,
            ExecError::BackendUnavailable(_) => ErrorCode::BackendUnavailable,
            ExecError::UnknownHandle(_) => ErrorCode::NotFound,
            ExecError::Pattern(_) => ErrorCode::SchemaInvalid,
            ExecError::Io(_) => ErrorCode::IoError,
        }
    }
}

/// A runtime that can run bundles.
///
/// Handles are owned by the caller; events are drained with [`poll`].
/// `preempt`, `suspend` and `resume` may be called while other threads poll.
///
/// [`poll`]: Backend::poll
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn name(&self) -> String {
        self.descriptor().name
    }

    fn provision(&self, req: &ProvisionRequest<'_>) -> Result<TaskHandle, ExecError>;

    /// Drain pending events for the handle, ordered by (ts, rank, seq).
    fn poll(&self, handle: &TaskHandle) -> Vec<TaskEvent>;

    /// Advance a virtual clock. Real-time backends ignore this.
    fn advance_to(&self, _now_s: u64) {}

    /// Stop every rank. Polite signal first, forced stop after `grace_s`.
    fn preempt(&self, handle: &TaskHandle, grace_s: u64) -> PreemptAck;

    fn suspend(&self, handle: &TaskHandle);

    fn resume(&self, handle: &TaskHandle);

    /// Files matching a glob, relative to each rank's working directory.
    fn fetch(&self, handle: &TaskHandle, pattern: &str) -> Result<Vec<FetchedFile>, ExecError>;

    /// Drop the job's working directories.
    fn release(&self, handle: &TaskHandle) -> Result<(), ExecError>;

    /// Health probe.
    fn probe(&self) -> bool;

    /// Runners that have not yet reported a terminal event.
    fn live_runners(&self) -> usize;
}

pub(crate) fn glob_matcher(pattern: &str) -> Result<globset::GlobMatcher, ExecError> {
    globset::GlobBuilder::new(pattern)
        .literal_separator(false)
        .build()
        .map(|g| g.compile_matcher())
        .map_err(|e| ExecError::Pattern(e.to_string()))
}
