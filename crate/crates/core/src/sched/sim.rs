//! Discrete-event workload driver over [`schedule_cycle`].
//!
//! Jobs arrive at their submit times and run for exactly their declared
//! runtimes. A cycle runs at every instant where something arrives or ends,
//! and one second after any preemption, as the controller's next period
//! would. Preempted jobs go back to the queue and restart from scratch. Gang
//! time-slicing is not modelled here; the driver disables it.

use std::collections::BTreeMap;

use super::{schedule_cycle, Allocation, ClusterState, NodeState, Policy, QueueEntry, RunningJob, Time};
use crate::ids::JobId;
use crate::schema::{Qos, ResourceReq};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimJob {
    pub job_id: JobId,
    pub user: String,
    pub qos: Qos,
    pub submit_s: Time,
    pub per_node: ResourceReq,
    pub nodes: u32,
    pub walltime_s: Time,
    /// Actual runtime; at most the walltime.
    pub runtime_s: Time,
}

impl SimJob {
    fn queue_entry(&self) -> QueueEntry {
        QueueEntry {
            job_id: self.job_id,
            user: self.user.clone(),
            qos: self.qos,
            submit_time_s: self.submit_s,
            per_node: self.per_node,
            nodes: self.nodes,
            walltime_s: self.walltime_s,
        }
    }
}

/// One execution interval of a job.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interval {
    pub job_id: JobId,
    pub start_s: Time,
    pub end_s: Time,
    pub nodes: Vec<String>,
    pub per_node: ResourceReq,
    pub backfill: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SimOutcome {
    /// Final (completed) start time per job.
    pub starts: BTreeMap<JobId, Time>,
    pub intervals: Vec<Interval>,
    /// The first reservation the scheduler made, with the cycle time.
    pub first_reservation: Option<(Time, JobId, Time)>,
    pub preemptions: Vec<(Time, JobId)>,
    /// Jobs that never started (no capacity could ever hold them).
    pub stranded: Vec<JobId>,
}

impl SimOutcome {
    /// Component-wise usage never exceeds capacity at any instant.
    pub fn respects_capacity(&self, nodes: &[NodeState]) -> bool {
        let mut instants: Vec<Time> = self.intervals.iter().map(|i| i.start_s).collect();
        instants.sort_unstable();
        instants.dedup();
        instants.iter().all(|&t| {
            nodes.iter().all(|node| {
                let used = self
                    .intervals
                    .iter()
                    .filter(|i| i.start_s <= t && t < i.end_s && i.nodes.contains(&node.name))
                    .fold(ResourceReq::ZERO, |acc, i| acc.add(&i.per_node));
                used.fits_within(&node.capacity)
            })
        })
    }
}

/// Run `jobs` to completion on nodes with the given capacities.
pub fn simulate(nodes: &[NodeState], jobs: &[SimJob], policy: &Policy) -> SimOutcome {
    let policy = Policy { gang_enabled: false, ..policy.clone() };
    let by_id: BTreeMap<JobId, &SimJob> = jobs.iter().map(|j| (j.job_id, j)).collect();
    let mut pending: Vec<&SimJob> = jobs.iter().collect();
    pending.sort_by_key(|j| (j.submit_s, j.job_id));
    let mut pending = pending.into_iter().peekable();

    let mut queue: Vec<QueueEntry> = Vec::new();
    let mut running: BTreeMap<JobId, (RunningJob, Time, usize)> = BTreeMap::new();
    let mut out = SimOutcome::default();
    let users = jobs.iter().map(|j| j.user.as_str());
    let accounts = policy.accounts(users, &BTreeMap::new());
    let mut requeued_at: Option<Time> = None;

    loop {
        let next_arrival = pending.peek().map(|j| j.submit_s);
        let next_end = running.values().map(|(_, end, _)| *end).min();
        let retry = requeued_at.take().map(|t| t + 1);
        let now = match [next_arrival, next_end, retry].into_iter().flatten().min() {
            Some(t) => t,
            None => break,
        };

        running.retain(|_, (_, end, _)| *end > now);
        while pending.peek().is_some_and(|j| j.submit_s == now) {
            queue.push(pending.next().expect("peeked").queue_entry());
        }

        let mut cluster = ClusterState::new(now, nodes.iter().map(|n| NodeState::new(&n.name, n.capacity)).collect());
        for (job, _, _) in running.values() {
            for name in &job.placement {
                let node = cluster.nodes.iter_mut().find(|n| &n.name == name).expect("known node");
                node.allocations.push(Allocation {
                    job_id: job.job_id,
                    resources: job.per_node,
                    est_end_s: job.est_end_s,
                });
            }
            cluster.running.push(job.clone());
        }

        let decision = schedule_cycle(&queue, &cluster, &accounts, &policy);
        if out.first_reservation.is_none() {
            if let Some(r) = &decision.reservation {
                out.first_reservation = Some((now, r.job_id, r.start_s));
            }
        }
        for victim in &decision.preemptions {
            let (job, _, interval) = running.remove(victim).expect("victim is running");
            out.intervals[interval].end_s = now;
            out.starts.remove(victim);
            out.preemptions.push((now, *victim));
            queue.push(by_id[&job.job_id].queue_entry());
            requeued_at = Some(now);
        }
        for start in &decision.starts {
            let job = by_id[&start.job_id];
            queue.retain(|e| e.job_id != start.job_id);
            let end = now + job.runtime_s.max(1);
            out.starts.insert(job.job_id, now);
            out.intervals.push(Interval {
                job_id: job.job_id,
                start_s: now,
                end_s: end,
                nodes: start.nodes.clone(),
                per_node: start.per_node,
                backfill: start.backfill,
            });
            let rj = RunningJob {
                job_id: job.job_id,
                user: job.user.clone(),
                qos: job.qos,
                submit_time_s: job.submit_s,
                start_time_s: now,
                per_node: job.per_node,
                placement: start.nodes.clone(),
                est_end_s: now + job.walltime_s,
                suspended: false,
            };
            running.insert(job.job_id, (rj, end, out.intervals.len() - 1));
        }
    }
    out.stranded = queue.iter().map(|e| e.job_id).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: u64, gpus: u32, submit: Time, wall: Time) -> SimJob {
        SimJob {
            job_id: JobId(id),
            user: "u".into(),
            qos: Qos::Normal,
            submit_s: submit,
            per_node: ResourceReq::new(1, gpus, 1),
            nodes: 1,
            walltime_s: wall,
            runtime_s: wall,
        }
    }

    #[test]
    fn reservation_example_plays_out() {
        let nodes = vec![NodeState::new("n1", ResourceReq::new(64, 4, 1 << 20))];
        let jobs = vec![job(1, 3, 0, 100), job(2, 4, 1, 50), job(3, 1, 2, 80), job(4, 1, 3, 200)];
        let out = simulate(&nodes, &jobs, &Policy::default());
        assert_eq!(out.starts[&JobId(1)], 0);
        assert_eq!(out.starts[&JobId(3)], 2);
        assert_eq!(out.starts[&JobId(2)], 100);
        assert_eq!(out.starts[&JobId(4)], 150);
        assert!(out.respects_capacity(&nodes));
        assert!(out.stranded.is_empty());
    }

    #[test]
    fn without_backfill_order_is_strict() {
        let nodes = vec![NodeState::new("n1", ResourceReq::new(64, 4, 1 << 20))];
        let jobs = vec![job(1, 3, 0, 100), job(2, 4, 1, 50), job(3, 1, 2, 80)];
        let policy = Policy { backfill_enabled: false, ..Policy::default() };
        let out = simulate(&nodes, &jobs, &policy);
        assert_eq!(out.starts[&JobId(2)], 100);
        assert_eq!(out.starts[&JobId(3)], 150);
    }
}
