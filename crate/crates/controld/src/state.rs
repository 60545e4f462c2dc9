//! Controller state as a pure fold over events.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use tacc_core::exec::{Health, SelectionTrace};
use tacc_core::sched::{usage_cost, GangJoin, GangOp, Reservation, Start};
use tacc_core::schema::{ResourceReq, TaskSpec};
use tacc_core::{Digest, ErrorCode, JobId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    Submitted,
    Compiling,
    Queued,
    Provisioning,
    Running,
    Suspended,
    Preempted,
    Succeeded,
    Failed,
    Killed,
}

impl JobState {
    pub const ALL: [JobState; 10] = [
        JobState::Submitted,
        JobState::Compiling,
        JobState::Queued,
        JobState::Provisioning,
        JobState::Running,
        JobState::Suspended,
        JobState::Preempted,
        JobState::Succeeded,
        JobState::Failed,
        JobState::Killed,
    ];

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Killed)
    }

    /// Holding (or entitled to) cluster resources.
    pub fn is_placed(&self) -> bool {
        matches!(self, JobState::Provisioning | JobState::Running | JobState::Suspended)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            JobState::Submitted => "Submitted",
            JobState::Compiling => "Compiling",
            JobState::Queued => "Queued",
            JobState::Provisioning => "Provisioning",
            JobState::Running => "Running",
            JobState::Suspended => "Suspended",
            JobState::Preempted => "Preempted",
            JobState::Succeeded => "Succeeded",
            JobState::Failed => "Failed",
            JobState::Killed => "Killed",
        }
    }

    pub fn parse(s: &str) -> Option<JobState> {
        JobState::ALL.into_iter().find(|st| st.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub spec: TaskSpec,
    pub spec_hash: Digest,
    pub bundle_id: Digest,
    pub state: JobState,
    /// Set for `Failed`.
    pub reason: Option<String>,
    pub submit_time_s: u64,
    /// Every state entered, with the event time.
    pub transitions: Vec<(JobState, u64)>,
    pub placement: Vec<String>,
    pub backend: Option<String>,
    pub runners: Vec<String>,
    pub selection: Option<SelectionTrace>,
    pub exit_codes: Vec<Option<i32>>,
    /// Per-rank terminal flags for the current run.
    pub rank_done: Vec<bool>,
    /// Active seconds accumulated in the current run.
    pub active_s: u64,
    /// Start of the current running stretch.
    pub running_since_s: Option<u64>,
    /// Times the job went through provisioning.
    pub attempts: u32,
    /// Working directories dropped and bundle no longer pinned.
    pub released: bool,
}

impl JobRecord {
    pub fn user(&self) -> &str {
        &self.spec.user
    }

    pub fn total_resources(&self) -> ResourceReq {
        self.spec.total_resources()
    }

    /// Active seconds of the current run as of `now`.
    pub fn active_at(&self, now_s: u64) -> u64 {
        self.active_s + self.running_since_s.map_or(0, |t| now_s.saturating_sub(t))
    }

    pub fn entered_at(&self, state: JobState) -> Option<u64> {
        self.transitions.iter().rev().find(|(s, _)| *s == state).map(|(_, t)| *t)
    }

    pub fn terminal_time_s(&self) -> Option<u64> {
        self.state.is_terminal().then(|| self.transitions.last().map_or(0, |(_, t)| *t))
    }
}

/// Jobs time-slicing one partition. `members[active]` is the resident one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GangRecord {
    pub partition: Vec<String>,
    pub per_node: ResourceReq,
    pub members: Vec<JobId>,
    pub active: usize,
    pub last_switch_s: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Submitted { spec: TaskSpec, spec_hash: Digest, bundle_id: Digest },
    /// Bundle verified against the controller's store.
    Compiled,
    Enqueued,
    Failed {
        reason: String,
        /// Set when provisioning failed on every eligible backend.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        selection: Option<SelectionTrace>,
    },
    DecisionApplied {
        starts: Vec<Start>,
        gang_joins: Vec<GangJoin>,
        preemptions: Vec<JobId>,
        gang_ops: Vec<GangOp>,
        reservation: Option<Reservation>,
    },
    Provisioned { backend: String, runners: Vec<String>, selection: SelectionTrace },
    RankStarted { rank: u32 },
    RankExited { rank: u32, code: i32 },
    RankFailed { rank: u32, cause: String },
    Preempted,
    Killed,
    Suspended,
    Resumed,
    BackendHealth { backend: String, health: Health },
    UsageDecayed,
    Released,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Submitted { .. } => "submitted",
            EventKind::Compiled => "compiled",
            EventKind::Enqueued => "enqueued",
            EventKind::Failed { .. } => "failed",
            EventKind::DecisionApplied { .. } => "decision_applied",
            EventKind::Provisioned { .. } => "provisioned",
            EventKind::RankStarted { .. } => "rank_started",
            EventKind::RankExited { .. } => "rank_exited",
            EventKind::RankFailed { .. } => "rank_failed",
            EventKind::Preempted => "preempted",
            EventKind::Killed => "killed",
            EventKind::Suspended => "suspended",
            EventKind::Resumed => "resumed",
            EventKind::BackendHealth { .. } => "backend_health",
            EventKind::UsageDecayed => "usage_decayed",
            EventKind::Released => "released",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub time_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("STATE_CONFLICT: job {job} is {state}, cannot apply {event}")]
    StateConflict { job: JobId, state: JobState, event: &'static str },
    #[error("STATE_CONFLICT: {0}")]
    Invalid(String),
    #[error("SEQUENCE_GAP: expected seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("NOT_FOUND: job {0}")]
    NotFound(JobId),
}

impl ApplyError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ApplyError::StateConflict { .. } | ApplyError::Invalid(_) => ErrorCode::StateConflict,
            ApplyError::SequenceGap { .. } => ErrorCode::SequenceGap,
            ApplyError::NotFound(_) => ErrorCode::NotFound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub last_seq: u64,
    /// Latest event time seen.
    pub last_time_s: u64,
    pub next_job_id: JobId,
    pub jobs: BTreeMap<JobId, JobRecord>,
    /// Decayed resource-seconds per user, as of `usage_time_s`.
    pub usage: BTreeMap<String, f64>,
    pub usage_time_s: u64,
    pub half_life_s: f64,
    pub backend_health: BTreeMap<String, Health>,
    pub gangs: Vec<GangRecord>,
}

impl ControllerState {
    pub fn new(half_life_s: f64) -> Self {
        ControllerState {
            last_seq: 0,
            last_time_s: 0,
            next_job_id: JobId(1),
            jobs: BTreeMap::new(),
            usage: BTreeMap::new(),
            usage_time_s: 0,
            half_life_s,
            backend_health: BTreeMap::new(),
            gangs: Vec::new(),
        }
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    pub fn gang_of(&self, id: JobId) -> Option<&GangRecord> {
        self.gangs.iter().find(|g| g.members.contains(&id))
    }

    /// Usage decayed to `now` without changing the state.
    pub fn usage_at(&self, now_s: u64) -> BTreeMap<String, f64> {
        let factor = decay_factor(now_s.saturating_sub(self.usage_time_s), self.half_life_s);
        self.usage.iter().map(|(u, v)| (u.clone(), v * factor)).collect()
    }

    fn decay_to(&mut self, now_s: u64) {
        if now_s <= self.usage_time_s {
            return;
        }
        let factor = decay_factor(now_s - self.usage_time_s, self.half_life_s);
        for v in self.usage.values_mut() {
            *v *= factor;
        }
        self.usage_time_s = now_s;
    }

    /// Apply one event. On error the state is unchanged.
    pub fn apply(&mut self, event: &Event) -> Result<(), ApplyError> {
        if event.seq != self.last_seq + 1 {
            return Err(ApplyError::SequenceGap { expected: self.last_seq + 1, got: event.seq });
        }
        self.check(event)?;
        self.mutate(event);
        self.last_seq = event.seq;
        self.last_time_s = self.last_time_s.max(event.time_s);
        Ok(())
    }

    fn job_for(&self, event: &Event) -> Result<&JobRecord, ApplyError> {
        let id = event.job_id.ok_or_else(|| ApplyError::Invalid(format!("{} needs a job id", event.kind.name())))?;
        self.jobs.get(&id).ok_or(ApplyError::NotFound(id))
    }

    /// Validate without mutating.
    fn check(&self, event: &Event) -> Result<(), ApplyError> {
        use EventKind as K;
        use JobState as S;
        let conflict = |job: &JobRecord| ApplyError::StateConflict { job: job.job_id, state: job.state, event: event.kind.name() };
        let require = |allowed: &[JobState]| -> Result<(), ApplyError> {
            let job = self.job_for(event)?;
            if allowed.contains(&job.state) {
                Ok(())
            } else {
                Err(conflict(job))
            }
        };
        match &event.kind {
            K::Submitted { .. } => {
                let id = event.job_id.ok_or_else(|| ApplyError::Invalid("submitted needs a job id".into()))?;
                if id != self.next_job_id {
                    return Err(ApplyError::Invalid(format!("job id {id} is not the next id {}", self.next_job_id)));
                }
                Ok(())
            }
            K::Compiled => require(&[S::Submitted]),
            K::Enqueued => require(&[S::Compiling, S::Preempted, S::Provisioning]),
            K::Failed { .. } => require(&[S::Compiling, S::Provisioning, S::Running]),
            K::DecisionApplied { starts, gang_joins, preemptions, .. } => {
                for id in starts.iter().map(|s| s.job_id).chain(gang_joins.iter().map(|j| j.job_id)) {
                    let job = self.jobs.get(&id).ok_or(ApplyError::NotFound(id))?;
                    if job.state != S::Queued {
                        return Err(conflict(job));
                    }
                }
                for s in starts {
                    let job = &self.jobs[&s.job_id];
                    if s.nodes.len() != job.spec.nodes as usize {
                        return Err(ApplyError::Invalid(format!("start of {} has wrong node count", s.job_id)));
                    }
                }
                for j in gang_joins {
                    let host = self.jobs.get(&j.host).ok_or(ApplyError::NotFound(j.host))?;
                    if !host.state.is_placed() {
                        return Err(conflict(host));
                    }
                }
                for id in preemptions {
                    let job = self.jobs.get(id).ok_or(ApplyError::NotFound(*id))?;
                    if job.state != S::Running {
                        return Err(conflict(job));
                    }
                }
                Ok(())
            }
            K::Provisioned { runners, .. } => {
                require(&[S::Provisioning])?;
                let job = self.job_for(event)?;
                if runners.len() != job.placement.len() {
                    return Err(ApplyError::Invalid(format!("job {} needs one runner per node", job.job_id)));
                }
                Ok(())
            }
            K::RankStarted { rank } | K::RankExited { rank, .. } | K::RankFailed { rank, .. } => {
                require(&[S::Running])?;
                let job = self.job_for(event)?;
                match job.rank_done.get(*rank as usize) {
                    None => Err(ApplyError::Invalid(format!("job {} has no rank {rank}", job.job_id))),
                    Some(true) if !matches!(event.kind, K::RankStarted { .. }) => {
                        Err(ApplyError::Invalid(format!("rank {rank} of job {} already terminated", job.job_id)))
                    }
                    _ => Ok(()),
                }
            }
            K::Preempted => require(&[S::Running]),
            K::Killed => require(&[S::Queued, S::Running, S::Suspended]),
            K::Suspended => require(&[S::Running]),
            K::Resumed => require(&[S::Suspended]),
            K::Released => {
                let job = self.job_for(event)?;
                if job.state.is_terminal() && !job.released {
                    Ok(())
                } else {
                    Err(conflict(job))
                }
            }
            K::BackendHealth { .. } | K::UsageDecayed => match event.job_id {
                None => Ok(()),
                Some(_) => Err(ApplyError::Invalid(format!("{} is a system event", event.kind.name()))),
            },
        }
    }

    fn transition(&mut self, id: JobId, to: JobState, time_s: u64) {
        let job = self.jobs.get_mut(&id).expect("checked");
        job.state = to;
        job.transitions.push((to, time_s));
    }

    /// Close the current running stretch and charge its usage.
    fn stop_running(&mut self, id: JobId, time_s: u64) {
        self.decay_to(time_s);
        let job = self.jobs.get_mut(&id).expect("checked");
        if let Some(since) = job.running_since_s.take() {
            let dt = time_s.saturating_sub(since);
            job.active_s += dt;
            let cost = usage_cost(&job.spec.total_resources(), dt as f64);
            *self.usage.entry(job.spec.user.clone()).or_insert(0.0) += cost;
        }
    }

    fn reset_run(&mut self, id: JobId) {
        let job = self.jobs.get_mut(&id).expect("checked");
        job.placement.clear();
        job.backend = None;
        job.runners.clear();
        job.rank_done.clear();
        job.exit_codes.clear();
        job.active_s = 0;
        job.running_since_s = None;
    }

    fn mutate(&mut self, event: &Event) {
        use EventKind as K;
        use JobState as S;
        let t = event.time_s;
        let id = event.job_id;
        match &event.kind {
            K::Submitted { spec, spec_hash, bundle_id } => {
                let id = id.expect("checked");
                self.jobs.insert(
                    id,
                    JobRecord {
                        job_id: id,
                        spec: spec.clone(),
                        spec_hash: *spec_hash,
                        bundle_id: *bundle_id,
                        state: S::Submitted,
                        reason: None,
                        submit_time_s: t,
                        transitions: vec![(S::Submitted, t)],
                        placement: Vec::new(),
                        backend: None,
                        runners: Vec::new(),
                        selection: None,
                        exit_codes: Vec::new(),
                        rank_done: Vec::new(),
                        active_s: 0,
                        running_since_s: None,
                        attempts: 0,
                        released: false,
                    },
                );
                self.usage.entry(spec.user.clone()).or_insert(0.0);
                self.next_job_id = id.next();
            }
            K::Compiled => self.transition(id.unwrap(), S::Compiling, t),
            K::Enqueued => {
                let id = id.unwrap();
                self.reset_run(id);
                self.transition(id, S::Queued, t);
            }
            K::Failed { reason, selection } => {
                let id = id.unwrap();
                if self.jobs[&id].state == S::Running {
                    self.stop_running(id, t);
                }
                let job = self.jobs.get_mut(&id).unwrap();
                job.reason = Some(reason.clone());
                if selection.is_some() {
                    job.selection = selection.clone();
                }
                self.transition(id, S::Failed, t);
            }
            K::DecisionApplied { starts, gang_joins, .. } => {
                for s in starts {
                    let job = self.jobs.get_mut(&s.job_id).unwrap();
                    job.placement = s.nodes.clone();
                    job.attempts += 1;
                    self.transition(s.job_id, S::Provisioning, t);
                }
                for j in gang_joins {
                    let per_node = self.jobs[&j.job_id].spec.resources;
                    let job = self.jobs.get_mut(&j.job_id).unwrap();
                    job.placement = j.nodes.clone();
                    job.attempts += 1;
                    self.transition(j.job_id, S::Provisioning, t);
                    match self.gangs.iter_mut().find(|g| g.members.contains(&j.host)) {
                        Some(g) => g.members.push(j.job_id),
                        None => self.gangs.push(GangRecord {
                            partition: j.nodes.clone(),
                            per_node,
                            members: vec![j.host, j.job_id],
                            active: 0,
                            last_switch_s: t,
                        }),
                    }
                }
            }
            K::Provisioned { backend, runners, selection } => {
                let id = id.unwrap();
                let job = self.jobs.get_mut(&id).unwrap();
                let n = job.placement.len();
                job.backend = Some(backend.clone());
                job.runners = runners.clone();
                job.selection = Some(selection.clone());
                job.exit_codes = vec![None; n];
                job.rank_done = vec![false; n];
                job.running_since_s = Some(t);
                self.transition(id, S::Running, t);
            }
            K::RankStarted { .. } => {}
            K::RankExited { rank, code } => self.rank_terminal(id.unwrap(), *rank, Some(*code), None, t),
            K::RankFailed { rank, cause } => self.rank_terminal(id.unwrap(), *rank, None, Some(cause.clone()), t),
            K::Preempted => {
                let id = id.unwrap();
                self.stop_running(id, t);
                self.transition(id, S::Preempted, t);
            }
            K::Killed => {
                let id = id.unwrap();
                if self.jobs[&id].state == S::Running {
                    self.stop_running(id, t);
                }
                self.transition(id, S::Killed, t);
            }
            K::Suspended => {
                let id = id.unwrap();
                self.stop_running(id, t);
                self.transition(id, S::Suspended, t);
            }
            K::Resumed => {
                let id = id.unwrap();
                self.jobs.get_mut(&id).unwrap().running_since_s = Some(t);
                self.transition(id, S::Running, t);
                if let Some(g) = self.gangs.iter_mut().find(|g| g.members.contains(&id)) {
                    g.active = g.members.iter().position(|m| *m == id).unwrap();
                    g.last_switch_s = t;
                }
            }
            K::BackendHealth { backend, health } => {
                self.backend_health.insert(backend.clone(), *health);
            }
            K::UsageDecayed => self.decay_to(t),
            K::Released => self.jobs.get_mut(&id.unwrap()).unwrap().released = true,
        }
        self.normalize_gangs();
    }

    fn rank_terminal(&mut self, id: JobId, rank: u32, code: Option<i32>, cause: Option<String>, t: u64) {
        let job = self.jobs.get_mut(&id).unwrap();
        job.rank_done[rank as usize] = true;
        job.exit_codes[rank as usize] = code;
        if job.reason.is_none() {
            job.reason = match (&cause, code) {
                (Some(c), _) => Some(format!("rank {rank} failed: {c}")),
                (None, Some(c)) if c != 0 => Some(format!("rank {rank} exited with code {c}")),
                _ => None,
            };
        }
        if job.rank_done.iter().all(|d| *d) {
            let ok = job.reason.is_none();
            self.stop_running(id, t);
            self.transition(id, if ok { JobState::Succeeded } else { JobState::Failed }, t);
        }
    }

    /// Drop departed members; dissolve groups that no longer time-slice.
    fn normalize_gangs(&mut self) {
        let jobs = &self.jobs;
        for g in &mut self.gangs {
            let mut i = 0;
            while i < g.members.len() {
                let placed = jobs.get(&g.members[i]).is_some_and(|j| j.state.is_placed());
                if placed {
                    i += 1;
                    continue;
                }
                g.members.remove(i);
                if i < g.active {
                    g.active -= 1;
                }
            }
            if !g.members.is_empty() {
                g.active %= g.members.len();
            }
        }
        self.gangs.retain(|g| match g.members.as_slice() {
            [] => false,
            [only] => jobs.get(only).is_some_and(|j| j.state != JobState::Running),
            _ => true,
        });
    }
}

fn decay_factor(dt_s: u64, half_life_s: f64) -> f64 {
    0.5f64.powf(dt_s as f64 / half_life_s)
}

/// Fold events into a fresh state.
pub fn replay<'a>(half_life_s: f64, events: impl IntoIterator<Item = &'a Event>) -> Result<ControllerState, ApplyError> {
    let mut state = ControllerState::new(half_life_s);
    for e in events {
        state.apply(e)?;
    }
    Ok(state)
}
