use std::collections::{BTreeMap, BTreeSet};

use super::priority::by_priority_then_start;
use super::{
    check_quota, compute_priority, gang_rotate, order_queue, Accounts, ClusterState, GangAction, GangJoin,
    Policy, QueueEntry, Reservation, RunningJob, ScheduleDecision, Start, Time,
};
use crate::ids::JobId;
use crate::schema::{Qos, ResourceReq};

/// Upper bound on subsets examined when searching for a minimum preemption
/// set before falling back to greedy selection with pruning.
const PREEMPTION_SEARCH_LIMIT: usize = 200_000;

/// First-fit placement of `nodes` ranks over nodes in name order. Each rank
/// needs its own node.
pub fn place_first_fit(
    per_node: &ResourceReq,
    nodes: u32,
    free: &BTreeMap<String, ResourceReq>,
) -> Option<Vec<String>> {
    let picked: Vec<String> = free
        .iter()
        .filter(|(_, f)| per_node.fits_within(f))
        .map(|(name, _)| name.clone())
        .take(nodes as usize)
        .collect();
    (picked.len() == nodes as usize).then_some(picked)
}

#[derive(Clone, Debug)]
struct Release {
    at: Time,
    job_id: JobId,
    node: String,
    resources: ResourceReq,
}

struct Head {
    start_s: Time,
    nodes: Vec<String>,
    shadow_free: BTreeMap<String, ResourceReq>,
}

/// Mutable working copy of the cluster for one cycle.
struct Work<'a> {
    now: Time,
    policy: &'a Policy,
    free: BTreeMap<String, ResourceReq>,
    releases: Vec<Release>,
    running_gpus: BTreeMap<String, u64>,
    jobs: BTreeMap<JobId, &'a RunningJob>,
    /// Gang partitions, existing and formed this cycle: (host job, members).
    gangs: Vec<(Vec<String>, ResourceReq, BTreeSet<JobId>)>,
    preempted: BTreeSet<JobId>,
}

impl<'a> Work<'a> {
    fn new(cluster: &'a ClusterState, policy: &'a Policy) -> Self {
        let now = cluster.now;
        let mut releases = Vec::new();
        for node in &cluster.nodes {
            for a in &node.allocations {
                releases.push(Release {
                    at: a.est_end_s.max(now + 1),
                    job_id: a.job_id,
                    node: node.name.clone(),
                    resources: a.resources,
                });
            }
        }
        let mut running_gpus = BTreeMap::new();
        for job in cluster.running.iter().filter(|j| !j.suspended) {
            *running_gpus.entry(job.user.clone()).or_insert(0) += job.gpus();
        }
        Work {
            now,
            policy,
            free: cluster.free_by_node(),
            releases,
            running_gpus,
            jobs: cluster.running.iter().map(|j| (j.job_id, j)).collect(),
            gangs: cluster
                .gangs
                .iter()
                .map(|g| (g.partition.clone(), g.per_node, g.members.iter().map(|m| m.job_id).collect()))
                .collect(),
            preempted: BTreeSet::new(),
        }
    }

    fn allocate(&mut self, job_id: JobId, nodes: &[String], per_node: &ResourceReq, release_at: Time) -> bool {
        if !nodes.iter().all(|n| self.free.get(n).is_some_and(|f| per_node.fits_within(f))) {
            return false;
        }
        for n in nodes {
            let f = self.free.get_mut(n).expect("node exists");
            *f = f.checked_sub(per_node).expect("checked above");
            self.releases.push(Release { at: release_at, job_id, node: n.clone(), resources: *per_node });
        }
        true
    }

    fn release(&mut self, job_id: JobId) {
        let (gone, keep): (Vec<Release>, Vec<Release>) =
            std::mem::take(&mut self.releases).into_iter().partition(|r| r.job_id == job_id);
        self.releases = keep;
        for r in gone {
            let f = self.free.get_mut(&r.node).expect("node exists");
            *f = f.add(&r.resources);
        }
    }

    fn add_gpus(&mut self, user: &str, gpus: u64) {
        *self.running_gpus.entry(user.to_string()).or_insert(0) += gpus;
    }

    fn sub_gpus(&mut self, user: &str, gpus: u64) {
        let g = self.running_gpus.entry(user.to_string()).or_insert(0);
        *g = g.saturating_sub(gpus);
    }

    fn gpus_of(&self, user: &str) -> u64 {
        self.running_gpus.get(user).copied().unwrap_or(0)
    }

    fn in_gang(&self, job: JobId) -> bool {
        self.gangs.iter().any(|(_, _, members)| members.contains(&job))
    }

    fn release_time_of(&self, job: JobId) -> Option<Time> {
        self.releases.iter().filter(|r| r.job_id == job).map(|r| r.at).max()
    }

    /// EASY reservation: the earliest release time at which the entry fits,
    /// assuming resident jobs end at their estimates.
    fn reservation_for(&self, entry: &QueueEntry) -> Option<Head> {
        let mut releases = self.releases.clone();
        releases.sort_by(|a, b| a.at.cmp(&b.at).then_with(|| a.node.cmp(&b.node)));
        let mut avail = self.free.clone();
        let mut i = 0;
        while i < releases.len() {
            let t = releases[i].at;
            while i < releases.len() && releases[i].at == t {
                let f = avail.get_mut(&releases[i].node).expect("node exists");
                *f = f.add(&releases[i].resources);
                i += 1;
            }
            if let Some(nodes) = place_first_fit(&entry.per_node, entry.nodes, &avail) {
                let mut shadow_free = avail;
                for n in &nodes {
                    let f = shadow_free.get_mut(n).expect("node exists");
                    *f = f.checked_sub(&entry.per_node).expect("placement fits");
                }
                return Some(Head { start_s: t, nodes, shadow_free });
            }
        }
        None
    }

    /// A resident preemptible job (or existing gang) with the same shape
    /// that `entry` could time-slice with.
    fn gang_host(&self, entry: &QueueEntry) -> Option<(JobId, Vec<String>)> {
        if !self.policy.gang_enabled || entry.qos != Qos::Preemptible {
            return None;
        }
        for (partition, per_node, members) in &self.gangs {
            if *per_node == entry.per_node && partition.len() == entry.nodes as usize {
                let host = *members.iter().next().expect("gangs are non-empty");
                return Some((host, partition.clone()));
            }
        }
        self.jobs
            .values()
            .filter(|j| {
                !j.suspended
                    && j.qos == Qos::Preemptible
                    && j.per_node == entry.per_node
                    && j.placement.len() == entry.nodes as usize
                    && !self.preempted.contains(&j.job_id)
                    && !self.in_gang(j.job_id)
            })
            .map(|j| (j.job_id, j.placement.clone()))
            .next()
    }

    fn join_gang(&mut self, entry: &QueueEntry, host: JobId, partition: &[String]) -> GangJoin {
        match self.gangs.iter_mut().find(|(p, _, m)| p == partition && m.contains(&host)) {
            Some((_, _, members)) => {
                members.insert(entry.job_id);
            }
            None => self.gangs.push((partition.to_vec(), entry.per_node, [host, entry.job_id].into())),
        }
        // The partition stays busy for the joiner's walltime as well.
        for r in self.releases.iter_mut().filter(|r| partition.contains(&r.node)) {
            let resident_in_gang = self
                .gangs
                .iter()
                .any(|(p, _, m)| p.as_slice() == partition && m.contains(&r.job_id));
            if resident_in_gang {
                r.at += entry.walltime_s;
            }
        }
        GangJoin { job_id: entry.job_id, host, nodes: partition.to_vec() }
    }

    /// Smallest set of preemptible running jobs whose removal lets `entry`
    /// start now. Among sets of equal size, prefers the lowest-priority
    /// victims, then the most recently started.
    fn preemption_set(&self, entry: &QueueEntry, accounts: &Accounts) -> Option<Vec<JobId>> {
        let mut candidates: Vec<(f64, Time, JobId)> = self
            .jobs
            .values()
            .filter(|j| {
                j.qos == Qos::Preemptible
                    && !j.suspended
                    && !self.in_gang(j.job_id)
                    && !self.preempted.contains(&j.job_id)
                    && self.releases.iter().any(|r| r.job_id == j.job_id)
            })
            .map(|j| {
                let fallback;
                let account = match accounts.get(&j.user) {
                    Some(a) => a,
                    None => {
                        fallback = self.policy.account(&j.user);
                        &fallback
                    }
                };
                let p = compute_priority(
                    j.submit_time_s,
                    j.qos,
                    account,
                    accounts,
                    self.now,
                    &self.policy.weights,
                    self.policy.age_max_s,
                );
                (p, j.start_time_s, j.job_id)
            })
            .collect();
        candidates.sort_by(by_priority_then_start);
        let ids: Vec<JobId> = candidates.into_iter().map(|c| c.2).collect();

        let fits_without = |victims: &[JobId]| {
            let mut avail = self.free.clone();
            for r in self.releases.iter().filter(|r| victims.contains(&r.job_id)) {
                let f = avail.get_mut(&r.node).expect("node exists");
                *f = f.add(&r.resources);
            }
            place_first_fit(&entry.per_node, entry.nodes, &avail).is_some()
        };
        if ids.is_empty() || !fits_without(&ids) {
            return None;
        }

        let mut examined = 0usize;
        for k in 1..=ids.len() {
            let mut combo: Vec<usize> = (0..k).collect();
            loop {
                examined += 1;
                if examined > PREEMPTION_SEARCH_LIMIT {
                    return Some(greedy_preemption(&ids, fits_without));
                }
                let victims: Vec<JobId> = combo.iter().map(|&i| ids[i]).collect();
                if fits_without(&victims) {
                    return Some(victims);
                }
                if !next_combination(&mut combo, ids.len()) {
                    break;
                }
            }
        }
        unreachable!("the full candidate set was shown to suffice")
    }
}

/// Advance `combo` to the next k-combination of 0..n in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn greedy_preemption(ids: &[JobId], fits_without: impl Fn(&[JobId]) -> bool) -> Vec<JobId> {
    let mut chosen = Vec::new();
    for id in ids {
        chosen.push(*id);
        if fits_without(&chosen) {
            break;
        }
    }
    // Prune so that no single victim is redundant.
    let mut i = chosen.len();
    while i > 0 {
        i -= 1;
        let mut without = chosen.clone();
        without.remove(i);
        if fits_without(&without) {
            chosen = without;
        }
    }
    chosen
}

/// One scheduler cycle.
///
/// 1. Gang rotation on time-sliced partitions.
/// 2. Queue entries in priority order start while they fit free resources
///    and pass quota. A preemptible entry that does not fit may instead join
///    a running job of the same shape as an extra gang.
/// 3. The first entry that cannot start is the head. A high-QoS head may
///    preempt the smallest sufficient set of preemptible jobs; otherwise it
///    gets a reservation at the earliest time enough resources free up.
/// 4. Later entries are backfilled if they fit now and either finish before
///    the reservation or fit in what the reservation leaves free (shadow).
pub fn schedule_cycle(
    queue: &[QueueEntry],
    cluster: &ClusterState,
    accounts: &Accounts,
    policy: &Policy,
) -> ScheduleDecision {
    let now = cluster.now;
    let mut work = Work::new(cluster, policy);
    let mut decision = ScheduleDecision::default();

    for group in &cluster.gangs {
        let remaining: Time = group.members.iter().map(|m| m.remaining_s).sum();
        for op in gang_rotate(group, now, policy.quantum_s) {
            let Some(job) = work.jobs.get(&op.job_id).copied() else { continue };
            match op.action {
                GangAction::Suspend => {
                    work.release(op.job_id);
                    work.sub_gpus(&job.user, job.gpus());
                }
                GangAction::Resume => {
                    if !work.allocate(op.job_id, &group.partition, &group.per_node, now + remaining.max(1)) {
                        continue;
                    }
                    work.add_gpus(&job.user, job.gpus());
                }
            }
            decision.gang_ops.push(op);
        }
    }

    let ordered = order_queue(queue, accounts, now, policy);
    let mut head: Option<Head> = None;

    for (entry, _) in ordered {
        let fallback;
        let account = match accounts.get(&entry.user) {
            Some(a) => a,
            None => {
                fallback = policy.account(&entry.user);
                &fallback
            }
        };
        if !check_quota(entry, account, work.gpus_of(&entry.user)).is_admit() {
            continue;
        }
        let placement = place_first_fit(&entry.per_node, entry.nodes, &work.free);

        match &mut head {
            None => {
                if let Some(nodes) = placement {
                    start(&mut work, &mut decision, entry, nodes, false);
                    continue;
                }
                if let Some((host, partition)) = work.gang_host(entry) {
                    let join = work.join_gang(entry, host, &partition);
                    decision.gang_joins.push(join);
                    continue;
                }
                if policy.preemption_enabled && entry.qos == Qos::High {
                    if let Some(victims) = work.preemption_set(entry, accounts) {
                        for v in &victims {
                            let job = work.jobs[v];
                            work.release(*v);
                            work.sub_gpus(&job.user, job.gpus());
                            work.preempted.insert(*v);
                        }
                        decision.preemptions.extend(victims);
                        let nodes = place_first_fit(&entry.per_node, entry.nodes, &work.free)
                            .expect("preemption set frees enough resources");
                        start(&mut work, &mut decision, entry, nodes, false);
                        continue;
                    }
                }
                // An entry that can never fit (e.g. its nodes are held by
                // suspended gangs) does not block the queue.
                if let Some(h) = work.reservation_for(entry) {
                    decision.reservation =
                        Some(Reservation { job_id: entry.job_id, start_s: h.start_s, nodes: h.nodes.clone() });
                    head = Some(h);
                    if !policy.backfill_enabled {
                        break;
                    }
                }
            }
            Some(h) => {
                if let Some(nodes) = placement {
                    if now + entry.walltime_s <= h.start_s {
                        start(&mut work, &mut decision, entry, nodes, true);
                    } else if nodes.iter().all(|n| entry.per_node.fits_within(&h.shadow_free[n])) {
                        for n in &nodes {
                            let f = h.shadow_free.get_mut(n).expect("node exists");
                            *f = f.checked_sub(&entry.per_node).expect("checked above");
                        }
                        start(&mut work, &mut decision, entry, nodes, true);
                    }
                } else if let Some((host, partition)) = work.gang_host(entry) {
                    // Joining must not delay the reservation: the partition
                    // must be outside it and already busy past its start.
                    let disjoint = partition.iter().all(|n| !h.nodes.contains(n));
                    let busy_past = work.release_time_of(host).is_some_and(|t| t > h.start_s);
                    if disjoint && busy_past {
                        let join = work.join_gang(entry, host, &partition);
                        decision.gang_joins.push(join);
                    }
                }
            }
        }
    }
    decision
}

fn start(work: &mut Work<'_>, decision: &mut ScheduleDecision, entry: &QueueEntry, nodes: Vec<String>, backfill: bool) {
    let ok = work.allocate(entry.job_id, &nodes, &entry.per_node, work.now + entry.walltime_s);
    debug_assert!(ok, "placement was computed against current free capacity");
    work.add_gpus(&entry.user, entry.gpus());
    decision.starts.push(Start { job_id: entry.job_id, nodes, per_node: entry.per_node, backfill });
}
