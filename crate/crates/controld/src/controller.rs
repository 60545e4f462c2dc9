//! The controller core: submission, the scheduler tick, supervision of
//! running tasks, and the read side used by protocol sessions.
//!
//! Every mutation goes through [`Core::commit`], which appends one event to
//! the log and folds it into the in-memory state. The tick holds
//! `tick_lock` for its whole run but takes the core lock only in short
//! sections, never across a backend call, so submissions proceed while a
//! tick stops or provisions tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tacc_core::bundle::{gc, BundleManifest, DirStore, ObjectStore};
use tacc_core::canonical::canonical_json;
use tacc_core::exec::{
    guess_language, Backend, BackendKind, FetchedFile, Health, LocalProcessBackend, ProvisionRequest, Registry,
    RuntimeChars, SimulatedBackend, StaticChars, TaskEventKind, TaskHandle,
};
use tacc_core::sched::{
    check_enqueue_quota, schedule_cycle, Allocation, ClusterState, GangAction, GangGroup, GangMember, NodeState,
    Policy, QueueEntry, RunningJob, ScheduleDecision,
};
use tacc_core::schema::{canonicalize, parse_task_spec, validate, ClusterLimits};
use tacc_core::{Digest, ErrorCode, JobId};
use tacc_proto::messages::{JobSummary, ListFilter};

use crate::config::{ClockKind, Config};
use crate::eventlog::{recover, Corruption, EventLog, LogError};
use crate::logs::LogHub;
use crate::state::{ControllerState, Event, EventKind, JobRecord, JobState};

pub const WALLTIME_EXCEEDED: &str = "WALLTIME_EXCEEDED";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct CtlError {
    pub code: ErrorCode,
    pub message: String,
}

impl CtlError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        CtlError { code, message: message.into() }
    }

    fn not_found(job: JobId) -> Self {
        CtlError::new(ErrorCode::NotFound, format!("no job {job}"))
    }
}

impl From<LogError> for CtlError {
    fn from(e: LogError) -> Self {
        CtlError::new(ErrorCode::IoError, e.to_string())
    }
}

enum Clock {
    Wall,
    Virtual(AtomicU64),
}

impl Clock {
    fn now(&self) -> u64 {
        match self {
            Clock::Wall => SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            Clock::Virtual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Start of a new tick.
    fn advance(&self) -> u64 {
        match self {
            Clock::Wall => self.now(),
            Clock::Virtual(t) => t.fetch_add(1, Ordering::SeqCst) + 1,
        }
    }
}

struct Core {
    state: ControllerState,
    log: EventLog,
    handles: BTreeMap<JobId, TaskHandle>,
}

impl Core {
    /// Append an event and apply it. The event is applied in the form read
    /// back from its canonical encoding, so the live state is exactly what a
    /// replay of the log produces.
    fn commit(&mut self, time_s: u64, job_id: Option<JobId>, kind: EventKind) -> Result<(), CtlError> {
        let event = Event { seq: self.state.last_seq + 1, time_s, job_id, kind };
        let text = canonical_json(&event).expect("events serialize");
        let event: Event = serde_json::from_str(&text).expect("canonical events parse");
        self.state.apply(&event).map_err(|e| CtlError::new(e.code(), e.to_string()))?;
        if let Err(e) = self.log.append(&event, &self.state) {
            // Memory and disk have diverged; continuing would corrupt history.
            panic!("event log append failed: {e}");
        }
        Ok(())
    }

    fn job(&self, id: JobId) -> Result<&JobRecord, CtlError> {
        self.state.jobs.get(&id).ok_or_else(|| CtlError::not_found(id))
    }
}

/// What a tick did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TickReport {
    pub now_s: u64,
    pub decision: ScheduleDecision,
    /// Jobs that failed over to another backend, with the backend used.
    pub failovers: Vec<(JobId, String)>,
}

/// Startup summary.
#[derive(Clone, Debug, Default)]
pub struct Recovery {
    pub replayed: u64,
    pub corrupt: Option<Corruption>,
    pub requeued: Vec<JobId>,
}

pub struct Controller {
    config: Config,
    policy: Policy,
    registry: Registry,
    store: Arc<DirStore>,
    clock: Clock,
    core: Mutex<Core>,
    logs: LogHub,
    tick_lock: Mutex<()>,
    shutdown: AtomicBool,
    /// Clock value of the latest CAS upload; garbage collection waits for
    /// uploads to go quiet so it cannot race a submission in progress.
    last_upload_s: AtomicU64,
    local_roots: Vec<PathBuf>,
    pub recovery: Recovery,
}

/// Backends as described by the config, working under `data_dir/work`.
pub fn backends_from_config(config: &Config) -> Vec<Arc<dyn Backend>> {
    let max = config.largest_node();
    config
        .backends
        .iter()
        .map(|b| -> Arc<dyn Backend> {
            match b.kind {
                BackendKind::LocalProcess => {
                    Arc::new(LocalProcessBackend::new(&b.name, config.data_dir.join("work").join(&b.name), max))
                }
                BackendKind::Simulated => Arc::new(SimulatedBackend::new(&b.name, max)),
            }
        })
        .collect()
}

impl Controller {
    pub fn open(config: Config) -> Result<Arc<Controller>, CtlError> {
        let backends = backends_from_config(&config);
        Controller::open_with(config, backends)
    }

    /// Open with explicit backend instances (tests keep handles to simulated
    /// backends for fault injection).
    pub fn open_with(config: Config, backends: Vec<Arc<dyn Backend>>) -> Result<Arc<Controller>, CtlError> {
        config.check().map_err(|e| CtlError::new(ErrorCode::SchemaInvalid, e.to_string()))?;
        let io = |e: std::io::Error| CtlError::new(ErrorCode::IoError, e.to_string());
        std::fs::create_dir_all(&config.data_dir).map_err(io)?;
        let store = Arc::new(DirStore::open(config.data_dir.join("cas")).map_err(io)?);
        let recovered = recover(&config.data_dir, config.policy.half_life_s)?;
        if let Some(c) = &recovered.corrupt {
            log::warn!("LOG_CORRUPT at seq {}: {}; keeping the valid prefix", c.seq, c.reason);
        }
        let mut log = EventLog::open(&config.data_dir, &recovered)?;
        log.snapshot_every = config.snapshot_every.max(1);

        let mut registry = Registry::new(backends);
        registry.probe_interval_s = config.probe_interval_s;
        registry.rules = config.selection.clone();
        let local_roots = config
            .backends
            .iter()
            .filter(|b| b.kind == BackendKind::LocalProcess)
            .map(|b| config.data_dir.join("work").join(&b.name))
            .collect();
        let clock = match config.clock {
            ClockKind::Wall => Clock::Wall,
            ClockKind::Virtual => Clock::Virtual(AtomicU64::new(recovered.state.last_time_s)),
        };
        let ctl = Controller {
            policy: config.policy.clone(),
            registry,
            store,
            clock,
            core: Mutex::new(Core { state: recovered.state, log, handles: BTreeMap::new() }),
            logs: LogHub::new(),
            tick_lock: Mutex::new(()),
            shutdown: AtomicBool::new(false),
            last_upload_s: AtomicU64::new(0),
            local_roots,
            recovery: Recovery { replayed: recovered.replayed, corrupt: recovered.corrupt, requeued: Vec::new() },
            config,
        };
        let mut ctl = ctl;
        ctl.recovery.requeued = ctl.requeue_in_flight()?;
        Ok(Arc::new(ctl))
    }

    /// Runners do not survive a restart: jobs that held resources go back
    /// to the queue, and terminal jobs lose their working directories.
    fn requeue_in_flight(&self) -> Result<Vec<JobId>, CtlError> {
        let now = self.clock.now();
        let mut core = self.core.lock().unwrap();
        let jobs: Vec<(JobId, JobState, bool)> =
            core.state.jobs.values().map(|j| (j.job_id, j.state, j.released)).collect();
        let mut requeued = Vec::new();
        for (id, state, released) in jobs {
            let steps: &[EventKind] = match state {
                JobState::Provisioning => &[EventKind::Enqueued],
                JobState::Running => &[EventKind::Preempted, EventKind::Enqueued],
                JobState::Suspended => &[EventKind::Resumed, EventKind::Preempted, EventKind::Enqueued],
                s if s.is_terminal() && !released => &[EventKind::Released],
                _ => &[],
            };
            for kind in steps {
                core.commit(now, Some(id), kind.clone())?;
            }
            if !steps.is_empty() {
                self.remove_local_dirs(id);
            }
            if state.is_placed() {
                requeued.push(id);
            }
        }
        Ok(requeued)
    }

    fn remove_local_dirs(&self, id: JobId) {
        for root in &self.local_roots {
            let dir = root.join(id.to_string());
            if dir.exists() {
                if let Err(e) = std::fs::remove_dir_all(&dir) {
                    log::warn!("removing {}: {e}", dir.display());
                }
            }
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> &DirStore {
        &self.store
    }

    pub fn logs(&self) -> &LogHub {
        &self.logs
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn note_upload(&self) {
        self.last_upload_s.store(self.now(), Ordering::SeqCst);
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.logs.notify();
    }

    pub fn is_shut_down(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    fn core(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap()
    }

    /// A copy of the full controller state.
    pub fn state(&self) -> ControllerState {
        self.core().state.clone()
    }

    pub fn job(&self, id: JobId) -> Option<JobRecord> {
        self.core().state.jobs.get(&id).cloned()
    }

    /// Runners currently held for a job.
    pub fn handle(&self, id: JobId) -> Option<TaskHandle> {
        self.core().handles.get(&id).cloned()
    }

    fn limits(&self) -> ClusterLimits {
        ClusterLimits::new(self.config.nodes.iter().map(|n| n.capacity()).collect())
    }

    // ---- submission ----

    /// Parse, validate and admit a task whose bundle is already uploaded.
    pub fn submit(&self, spec_doc: &str, manifest_id: Digest) -> Result<JobId, CtlError> {
        let spec =
            parse_task_spec(spec_doc).map_err(|e| CtlError::new(ErrorCode::SchemaInvalid, e.to_string()))?;
        let report = validate(&spec, &self.limits());
        if !report.ok {
            let code = if report.errors().any(|i| i.code == ErrorCode::Unsatisfiable.as_str()) {
                ErrorCode::Unsatisfiable
            } else {
                ErrorCode::SchemaInvalid
            };
            return Err(CtlError::new(code, report.to_string()));
        }
        let spec_hash = canonicalize(&spec).spec_hash;
        let now = self.now();
        let mut core = self.core();
        let queued = core
            .state
            .jobs
            .values()
            .filter(|j| j.spec.user == spec.user)
            .filter(|j| matches!(j.state, JobState::Submitted | JobState::Compiling | JobState::Queued | JobState::Preempted))
            .count() as u64;
        if let tacc_core::sched::QuotaVerdict::Deny(reason) =
            check_enqueue_quota(&self.policy.account(&spec.user), queued)
        {
            return Err(CtlError::new(ErrorCode::QuotaExceeded, reason));
        }
        let id = core.state.next_job_id;
        core.commit(now, Some(id), EventKind::Submitted { spec, spec_hash, bundle_id: manifest_id })?;
        core.commit(now, Some(id), EventKind::Compiled)?;
        match self.check_bundle(manifest_id, spec_hash) {
            Ok(()) => core.commit(now, Some(id), EventKind::Enqueued)?,
            Err(reason) => core.commit(now, Some(id), EventKind::Failed { reason, selection: None })?,
        }
        Ok(id)
    }

    /// The bundle must be complete in the store and built from this spec.
    fn check_bundle(&self, manifest_id: Digest, spec_hash: Digest) -> Result<(), String> {
        let manifest = match self.store.get_manifest(&manifest_id) {
            Ok(Some(m)) => m,
            Ok(None) => return Err(format!("MISSING_OBJECT: manifest {manifest_id} was not uploaded")),
            Err(e) => return Err(format!("IO_ERROR: {e}")),
        };
        if manifest.spec_hash != spec_hash {
            return Err(format!("SCHEMA_INVALID: bundle {manifest_id} was built from a different task spec"));
        }
        if let Some(missing) = manifest.objects().into_iter().find(|c| !self.store.has_object(&c.id)) {
            return Err(format!("MISSING_OBJECT: object {} of bundle {manifest_id} was not uploaded", missing.id));
        }
        Ok(())
    }

    // ---- read side ----

    fn summary(job: &JobRecord, now_s: u64) -> JobSummary {
        JobSummary {
            job_id: job.job_id,
            name: job.spec.name.clone(),
            user: job.spec.user.clone(),
            state: job.state.to_string(),
            reason: job.reason.clone(),
            submit_time_s: job.submit_time_s,
            now_s,
            nodes: job.spec.nodes,
            placement: job.placement.clone(),
            backend: job.backend.clone(),
            exit_codes: job.exit_codes.clone(),
            selection: job.selection.clone(),
            spec_hash: job.spec_hash,
            bundle_id: job.bundle_id,
        }
    }

    pub fn list(&self, filter: &ListFilter) -> Result<Vec<JobSummary>, CtlError> {
        let states = match &filter.states {
            Some(names) => Some(
                names
                    .iter()
                    .map(|n| {
                        JobState::parse(n)
                            .ok_or_else(|| CtlError::new(ErrorCode::ProtocolError, format!("unknown state {n}")))
                    })
                    .collect::<Result<BTreeSet<_>, _>>()?,
            ),
            None => None,
        };
        let now = self.now();
        let core = self.core();
        Ok(core
            .state
            .jobs
            .values()
            .filter(|j| filter.user.as_ref().is_none_or(|u| &j.spec.user == u))
            .filter(|j| states.as_ref().is_none_or(|s| s.contains(&j.state)))
            .map(|j| Controller::summary(j, now))
            .collect())
    }

    pub fn status(&self, id: JobId) -> Result<JobSummary, CtlError> {
        let now = self.now();
        let core = self.core();
        core.job(id).map(|j| Controller::summary(j, now))
    }

    /// Files matching `pattern` in every rank's working directory. Jobs that
    /// never ran, or whose directories were collected, match nothing.
    pub fn fetch(&self, id: JobId, pattern: &str) -> Result<Vec<FetchedFile>, CtlError> {
        let handle = {
            let core = self.core();
            core.job(id)?;
            core.handles.get(&id).cloned()
        };
        let Some(handle) = handle else { return Ok(Vec::new()) };
        let backend = self.registry.get(&handle.backend).expect("handles name registered backends");
        match backend.fetch(&handle, pattern) {
            Ok(files) => Ok(files),
            Err(tacc_core::exec::ExecError::UnknownHandle(_)) => Ok(Vec::new()),
            Err(e) => Err(CtlError::new(e.code(), e.to_string())),
        }
    }

    // ---- kill ----

    /// Queued jobs are killed at once; running or suspended jobs are stopped
    /// on every rank first.
    pub fn kill(&self, id: JobId) -> Result<JobState, CtlError> {
        let _tick = self.tick_lock.lock().unwrap();
        let now = self.now();
        let state = self.core().job(id)?.state;
        match state {
            JobState::Queued => {
                self.core().commit(now, Some(id), EventKind::Killed)?;
            }
            JobState::Running | JobState::Suspended => {
                if let Some(handle) = self.handle(id) {
                    // Natural exits that already happened take precedence.
                    self.drain_job(&handle, now);
                    let still = self.core().job(id)?.state;
                    if !matches!(still, JobState::Running | JobState::Suspended) {
                        return Err(CtlError::new(
                            ErrorCode::StateConflict,
                            format!("job {id} is {still}, cannot kill"),
                        ));
                    }
                    self.stop(&handle);
                }
                self.core().commit(now, Some(id), EventKind::Killed)?;
                self.logs.close(id);
            }
            other => {
                return Err(CtlError::new(ErrorCode::StateConflict, format!("job {id} is {other}, cannot kill")));
            }
        }
        Ok(self.core().job(id)?.state)
    }

    /// Stop every live rank and collect the remaining output.
    fn stop(&self, handle: &TaskHandle) {
        let backend = self.registry.get(&handle.backend).expect("registered");
        backend.preempt(handle, self.policy.grace_s);
        let events = backend.poll(handle);
        self.logs.push(handle.job_id, &events);
    }

    // ---- tick ----

    /// Run the tick loop until shutdown.
    pub fn run(self: &Arc<Self>) {
        let period = Duration::from_millis(self.config.tick_ms);
        while !self.is_shut_down() {
            let started = std::time::Instant::now();
            self.tick();
            if let Some(rest) = period.checked_sub(started.elapsed()) {
                std::thread::sleep(rest);
            }
        }
    }

    /// One scheduler period.
    pub fn tick(&self) -> TickReport {
        let _tick = self.tick_lock.lock().unwrap();
        let now = self.clock.advance();
        for b in self.registry.backends() {
            b.advance_to(now);
        }
        self.drain_all(now);
        self.probe(now);
        self.enforce_walltime(now);
        self.commit_or_log(now, None, EventKind::UsageDecayed);

        let (queue, cluster, accounts) = {
            let core = self.core();
            self.snapshot(&core.state, now)
        };
        let decision = schedule_cycle(&queue, &cluster, &accounts, &self.policy);
        let mut report = TickReport { now_s: now, decision: decision.clone(), failovers: Vec::new() };
        if decision.is_empty() && decision.reservation.is_none() {
            self.collect(now);
            return report;
        }
        self.commit_or_log(
            now,
            None,
            EventKind::DecisionApplied {
                starts: decision.starts.clone(),
                gang_joins: decision.gang_joins.clone(),
                preemptions: decision.preemptions.clone(),
                gang_ops: decision.gang_ops.clone(),
                reservation: decision.reservation.clone(),
            },
        );
        for op in &decision.gang_ops {
            let Some(handle) = self.handle(op.job_id) else { continue };
            let backend = self.registry.get(&handle.backend).expect("registered");
            match op.action {
                GangAction::Suspend => {
                    backend.suspend(&handle);
                    self.commit_or_log(now, Some(op.job_id), EventKind::Suspended);
                }
                GangAction::Resume => {
                    backend.resume(&handle);
                    self.commit_or_log(now, Some(op.job_id), EventKind::Resumed);
                }
            }
        }
        for victim in &decision.preemptions {
            self.preempt(*victim, now);
        }
        let joiners: BTreeSet<JobId> = decision.gang_joins.iter().map(|j| j.job_id).collect();
        for id in decision.starts.iter().map(|s| s.job_id).chain(decision.gang_joins.iter().map(|j| j.job_id)) {
            if let Some(backend) = self.provision(id, now, &mut report) {
                if joiners.contains(&id) {
                    let handle = self.handle(id).expect("just provisioned");
                    self.registry.get(&backend).expect("registered").suspend(&handle);
                    self.commit_or_log(now, Some(id), EventKind::Suspended);
                }
            }
        }
        self.collect(now);
        report
    }

    /// Commit an event the tick has already validated against its own view.
    /// A rejection means that view was stale; the next tick starts over.
    fn commit_or_log(&self, now: u64, job: Option<JobId>, kind: EventKind) -> bool {
        let name = kind.name();
        match self.core().commit(now, job, kind) {
            Ok(()) => true,
            Err(e) => {
                log::warn!("dropping {name} for {job:?}: {e}");
                false
            }
        }
    }

    /// Queue, cluster and accounts as the scheduler sees them at `now`.
    fn snapshot(
        &self,
        state: &ControllerState,
        now: u64,
    ) -> (Vec<QueueEntry>, ClusterState, tacc_core::sched::Accounts) {
        let queue: Vec<QueueEntry> = state
            .jobs
            .values()
            .filter(|j| j.state == JobState::Queued)
            .map(|j| QueueEntry {
                job_id: j.job_id,
                user: j.spec.user.clone(),
                qos: j.spec.qos,
                submit_time_s: j.submit_time_s,
                per_node: j.spec.resources,
                nodes: j.spec.nodes,
                walltime_s: j.spec.walltime_estimate_s,
            })
            .collect();

        let remaining = |j: &JobRecord| j.spec.walltime_estimate_s.saturating_sub(j.active_at(now));
        let mut gangs = Vec::new();
        let mut parked = BTreeSet::new();
        let mut gang_end = BTreeMap::new();
        for g in &state.gangs {
            let members: Vec<GangMember> = g
                .members
                .iter()
                .map(|id| {
                    let j = &state.jobs[id];
                    GangMember { job_id: *id, running: j.state == JobState::Running, remaining_s: remaining(j) }
                })
                .collect();
            let total: u64 = members.iter().map(|m| m.remaining_s).sum();
            for (i, m) in members.iter().enumerate() {
                if i != g.active {
                    parked.insert(m.job_id);
                } else {
                    gang_end.insert(m.job_id, now + total.max(1));
                }
            }
            gangs.push(GangGroup {
                partition: g.partition.clone(),
                per_node: g.per_node,
                members,
                active: g.active,
                last_switch_s: g.last_switch_s,
            });
        }

        let mut nodes: Vec<NodeState> =
            self.config.nodes.iter().map(|n| NodeState::new(&n.name, n.capacity())).collect();
        let mut running = Vec::new();
        for j in state.jobs.values().filter(|j| j.state.is_placed()) {
            let suspended = j.state == JobState::Suspended || parked.contains(&j.job_id);
            let est_end_s = gang_end.get(&j.job_id).copied().unwrap_or(now + remaining(j).max(1));
            if !suspended {
                for name in &j.placement {
                    if let Some(node) = nodes.iter_mut().find(|n| &n.name == name) {
                        node.allocations.push(Allocation { job_id: j.job_id, resources: j.spec.resources, est_end_s });
                    }
                }
            }
            running.push(RunningJob {
                job_id: j.job_id,
                user: j.spec.user.clone(),
                qos: j.spec.qos,
                submit_time_s: j.submit_time_s,
                start_time_s: j.entered_at(JobState::Provisioning).unwrap_or(now),
                per_node: j.spec.resources,
                placement: j.placement.clone(),
                est_end_s,
                suspended,
            });
        }
        let cluster = ClusterState { now, nodes, running, gangs };
        let users: Vec<&str> = state.jobs.values().map(|j| j.spec.user.as_str()).collect();
        let accounts = self.policy.accounts(users, &state.usage_at(now));
        (queue, cluster, accounts)
    }

    fn drain_all(&self, now: u64) {
        let handles: Vec<TaskHandle> = {
            let core = self.core();
            core.handles
                .values()
                .filter(|h| core.state.jobs.get(&h.job_id).is_some_and(|j| j.state.is_placed()))
                .cloned()
                .collect()
        };
        for h in &handles {
            self.drain_job(h, now);
        }
    }

    /// Turn a job's pending task events into log lines and state events. A
    /// rank that fails or exits non-zero takes the remaining ranks down.
    fn drain_job(&self, handle: &TaskHandle, now: u64) {
        let backend = self.registry.get(&handle.backend).expect("registered");
        loop {
            let events = backend.poll(handle);
            if events.is_empty() {
                return;
            }
            self.logs.push(handle.job_id, &events);
            let mut stop = false;
            {
                let mut core = self.core();
                for e in &events {
                    let running = core.state.jobs.get(&handle.job_id).is_some_and(|j| j.state == JobState::Running);
                    if !running {
                        break;
                    }
                    let kind = match &e.kind {
                        TaskEventKind::Started => EventKind::RankStarted { rank: e.rank },
                        TaskEventKind::LogLine { .. } => continue,
                        TaskEventKind::Exited { code } => {
                            stop |= *code != 0;
                            EventKind::RankExited { rank: e.rank, code: *code }
                        }
                        TaskEventKind::Failed { cause } => {
                            stop = true;
                            EventKind::RankFailed { rank: e.rank, cause: cause.clone() }
                        }
                    };
                    if let Err(err) = core.commit(now, Some(handle.job_id), kind) {
                        log::warn!("job {}: {err}", handle.job_id);
                    }
                }
                let job = &core.state.jobs[&handle.job_id];
                if job.state.is_terminal() {
                    self.logs.close(handle.job_id);
                }
                stop &= job.state == JobState::Running;
            }
            if stop {
                backend.preempt(handle, self.policy.grace_s);
            }
        }
    }

    fn probe(&self, now: u64) {
        for name in self.registry.probe_due(now) {
            self.commit_or_log(now, None, EventKind::BackendHealth { backend: name, health: Health::Up });
        }
    }

    fn enforce_walltime(&self, now: u64) {
        let factor = self.policy.walltime_grace_factor;
        let over: Vec<(JobId, u64)> = {
            let core = self.core();
            core.state
                .jobs
                .values()
                .filter(|j| j.state == JobState::Running)
                .filter(|j| j.active_at(now) as f64 > j.spec.walltime_estimate_s as f64 * factor)
                .map(|j| (j.job_id, j.active_at(now)))
                .collect()
        };
        for (id, active) in over {
            let reason = format!("{WALLTIME_EXCEEDED}: ran {active} s");
            if self.commit_or_log(now, Some(id), EventKind::Failed { reason, selection: None }) {
                if let Some(h) = self.handle(id) {
                    self.stop(&h);
                }
                self.logs.close(id);
            }
        }
    }

    /// Stop a victim and requeue it. Its bundle stays in place, so the rerun
    /// needs no upload.
    fn preempt(&self, id: JobId, now: u64) {
        if let Some(h) = self.handle(id) {
            self.stop(&h);
            let backend = self.registry.get(&h.backend).expect("registered");
            if let Err(e) = backend.release(&h) {
                log::warn!("releasing job {id}: {e}");
            }
            self.core().handles.remove(&id);
        }
        if self.commit_or_log(now, Some(id), EventKind::Preempted) {
            self.commit_or_log(now, Some(id), EventKind::Enqueued);
        }
    }

    /// Provision a started job, failing over down the ranked backend list.
    /// Returns the backend it landed on.
    fn provision(&self, id: JobId, now: u64, report: &mut TickReport) -> Option<String> {
        let Some(job) = self.job(id) else { return None };
        if job.state != JobState::Provisioning {
            return None;
        }
        let fail = |reason: String, selection| {
            self.commit_or_log(now, Some(id), EventKind::Failed { reason, selection });
            self.logs.close(id);
            None
        };
        let manifest: BundleManifest = match self.store.get_manifest(&job.bundle_id) {
            Ok(Some(m)) => m,
            Ok(None) => return fail(format!("MISSING_OBJECT: manifest {}", job.bundle_id), None),
            Err(e) => return fail(format!("IO_ERROR: {e}"), None),
        };
        let static_chars =
            StaticChars { language: guess_language(&job.spec.entrypoint), bundle_size_bytes: manifest.payload_bytes() };
        let runtime_chars = RuntimeChars { expected_duration_s: job.spec.walltime_estimate_s };
        let mut trace = match self.registry.select_backend(&job.spec, &static_chars, &runtime_chars) {
            Ok(t) => t,
            Err(e) => return fail(e.to_string(), None),
        };
        let mut attempted = BTreeSet::new();
        let mut current = trace.backends[0].clone();
        loop {
            attempted.insert(current.clone());
            let backend = self.registry.get(&current).expect("trace names registered backends");
            let req = ProvisionRequest {
                job_id: id,
                spec: &job.spec,
                manifest: &manifest,
                store: self.store.as_ref(),
                placement: job.placement.clone(),
                env: BTreeMap::new(),
                now_s: now,
            };
            let cause = match backend.provision(&req) {
                Ok(handle) => {
                    let runners = handle.runners.clone();
                    self.core().handles.insert(id, handle);
                    self.logs.reopen(id);
                    let ok = self.commit_or_log(
                        now,
                        Some(id),
                        EventKind::Provisioned { backend: current.clone(), runners, selection: trace },
                    );
                    if attempted.len() > 1 {
                        report.failovers.push((id, current.clone()));
                    }
                    return ok.then_some(current);
                }
                Err(e) => e.to_string(),
            };
            log::warn!("job {id}: provisioning on {current} failed: {cause}");
            let was_up = self.registry.is_up(&current);
            let next = self.registry.failover(&mut trace, &current, &attempted, now);
            if was_up && !self.registry.is_up(&current) {
                self.commit_or_log(now, None, EventKind::BackendHealth { backend: current.clone(), health: Health::Down });
            }
            match next {
                Some(n) => current = n,
                None => {
                    let reason = format!(
                        "BACKEND_UNAVAILABLE: provisioning failed on every eligible backend ({}); last error: {cause}",
                        attempted.iter().cloned().collect::<Vec<_>>().join(", ")
                    );
                    return fail(reason, Some(trace));
                }
            }
        }
    }

    /// Drop working directories of jobs past retention, then collect bundles
    /// no retained job references.
    fn collect(&self, now: u64) {
        let retention = self.config.retention_s;
        let expired: Vec<JobId> = {
            let core = self.core();
            core.state
                .jobs
                .values()
                .filter(|j| !j.released && j.terminal_time_s().is_some_and(|t| t.saturating_add(retention) <= now))
                .map(|j| j.job_id)
                .collect()
        };
        if expired.is_empty() {
            return;
        }
        for id in &expired {
            let handle = self.core().handles.remove(id);
            if let Some(h) = handle {
                if let Err(e) = self.registry.get(&h.backend).expect("registered").release(&h) {
                    log::warn!("releasing job {id}: {e}");
                }
            }
            self.logs.forget(*id);
            self.commit_or_log(now, Some(*id), EventKind::Released);
        }
        let quiet = now.saturating_sub(self.last_upload_s.load(Ordering::SeqCst)) >= 3600;
        if !quiet {
            return;
        }
        let live_ids: BTreeSet<Digest> = {
            let core = self.core();
            core.state.jobs.values().filter(|j| !j.released).map(|j| j.bundle_id).collect()
        };
        let live: Vec<BundleManifest> =
            live_ids.iter().filter_map(|id| self.store.get_manifest(id).ok().flatten()).collect();
        match gc(self.store.as_ref(), &live) {
            Ok(freed) => log::info!("gc freed {freed} bytes"),
            Err(e) => log::warn!("gc: {e}"),
        }
    }
}
