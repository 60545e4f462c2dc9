//! Scheduling layer: a pure decision engine.
//!
//! Given the queue, a snapshot of the cluster and the user accounts, a
//! scheduler cycle decides which jobs start now and where, which jobs are
//! backfilled, which running jobs are preempted, the head job's reservation,
//! and gang time-slicing operations. Nothing here performs I/O; the
//! controller applies decisions.
//!
//! Policies are layered: priority order (age, fair-share, QoS), then gang
//! joins for preemptible jobs that can time-slice with a running job of the
//! same shape, then preemption for a blocked high-QoS head, then EASY
//! backfill around the head's reservation.

mod cycle;
mod fairshare;
mod gang;
mod policy;
mod priority;
mod quota;
pub mod sim;

pub use cycle::{place_first_fit, schedule_cycle};
pub use fairshare::{decay_usage, fair_share_factor, usage_cost};
pub use gang::gang_rotate;
pub use policy::{AccountPolicy, Policy, PolicyWeights};
pub use priority::{compute_priority, order_queue, qos_norm};
pub use quota::{check_enqueue_quota, check_quota, QuotaVerdict};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::JobId;
use crate::schema::{Qos, ResourceReq};

/// Seconds on the controller's clock (virtual in simulation).
pub type Time = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub job_id: JobId,
    pub resources: ResourceReq,
    pub est_end_s: Time,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub name: String,
    pub capacity: ResourceReq,
    pub allocations: Vec<Allocation>,
}

impl NodeState {
    pub fn new(name: impl Into<String>, capacity: ResourceReq) -> Self {
        NodeState { name: name.into(), capacity, allocations: Vec::new() }
    }

    pub fn used(&self) -> ResourceReq {
        self.allocations.iter().fold(ResourceReq::ZERO, |acc, a| acc.add(&a.resources))
    }

    /// Free capacity. `None` if the node is oversubscribed.
    pub fn free(&self) -> Option<ResourceReq> {
        self.capacity.checked_sub(&self.used())
    }
}

/// A job holding (or, when suspended in a gang, entitled to) resources.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningJob {
    pub job_id: JobId,
    pub user: String,
    pub qos: Qos,
    pub submit_time_s: Time,
    pub start_time_s: Time,
    pub per_node: ResourceReq,
    /// Node names in rank order.
    pub placement: Vec<String>,
    pub est_end_s: Time,
    pub suspended: bool,
}

impl RunningJob {
    pub fn gpus(&self) -> u64 {
        u64::from(self.per_node.gpus) * self.placement.len() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GangMember {
    pub job_id: JobId,
    pub running: bool,
    /// Estimated seconds of work left.
    pub remaining_s: Time,
}

/// Jobs time-slicing one partition. Exactly one member (the active gang) is
/// resident at a time; members share a resource shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GangGroup {
    pub partition: Vec<String>,
    pub per_node: ResourceReq,
    pub members: Vec<GangMember>,
    pub active: usize,
    pub last_switch_s: Time,
}

impl GangGroup {
    pub fn contains(&self, job: JobId) -> bool {
        self.members.iter().any(|m| m.job_id == job)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub now: Time,
    pub nodes: Vec<NodeState>,
    pub running: Vec<RunningJob>,
    pub gangs: Vec<GangGroup>,
}

impl ClusterState {
    pub fn new(now: Time, nodes: Vec<NodeState>) -> Self {
        ClusterState { now, nodes, running: Vec::new(), gangs: Vec::new() }
    }

    /// Every node satisfies Σ allocations ≤ capacity.
    pub fn is_consistent(&self) -> bool {
        self.nodes.iter().all(|n| n.free().is_some())
    }

    /// Free capacity per node, keyed by name.
    pub fn free_by_node(&self) -> BTreeMap<String, ResourceReq> {
        self.nodes
            .iter()
            .map(|n| (n.name.clone(), n.free().unwrap_or(ResourceReq::ZERO)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub max_running_gpus: u32,
    pub max_queued_jobs: u32,
}

impl Quota {
    pub const UNLIMITED: Quota = Quota { max_running_gpus: u32::MAX, max_queued_jobs: u32::MAX };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountState {
    pub user: String,
    pub share_weight: f64,
    /// Decayed resource-seconds.
    pub decayed_usage: f64,
    pub quota: Quota,
}

impl AccountState {
    pub fn new(user: impl Into<String>, share_weight: f64) -> Self {
        AccountState { user: user.into(), share_weight, decayed_usage: 0.0, quota: Quota::UNLIMITED }
    }
}

/// Accounts keyed by user name.
pub type Accounts = BTreeMap<String, AccountState>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub job_id: JobId,
    pub user: String,
    pub qos: Qos,
    pub submit_time_s: Time,
    pub per_node: ResourceReq,
    pub nodes: u32,
    pub walltime_s: Time,
}

impl QueueEntry {
    pub fn gpus(&self) -> u64 {
        u64::from(self.per_node.gpus) * u64::from(self.nodes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Start {
    pub job_id: JobId,
    /// Node names in rank order; each receives `per_node`.
    pub nodes: Vec<String>,
    pub per_node: ResourceReq,
    pub backfill: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub job_id: JobId,
    pub start_s: Time,
    pub nodes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GangAction {
    Suspend,
    Resume,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GangOp {
    pub job_id: JobId,
    pub action: GangAction,
}

/// A queued job joining a running job's partition as an extra gang.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GangJoin {
    pub job_id: JobId,
    pub host: JobId,
    pub nodes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub starts: Vec<Start>,
    pub preemptions: Vec<JobId>,
    pub reservation: Option<Reservation>,
    pub gang_ops: Vec<GangOp>,
    pub gang_joins: Vec<GangJoin>,
}

impl ScheduleDecision {
    /// Starts flagged as backfill.
    pub fn backfills(&self) -> Vec<JobId> {
        self.starts.iter().filter(|s| s.backfill).map(|s| s.job_id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty() && self.preemptions.is_empty() && self.gang_ops.is_empty() && self.gang_joins.is_empty()
    }
}
