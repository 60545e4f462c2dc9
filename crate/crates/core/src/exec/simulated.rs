use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    glob_matcher, Backend, BackendDescriptor, BackendKind, Capabilities, ExecError, FetchedFile, Health, LogStream,
    PreemptAck, ProvisionRequest, TaskEvent, TaskEventKind, TaskHandle, FEATURE_MULTI_NODE,
};
use crate::bundle::{BundleManifest, ObjectStore};
use crate::ids::JobId;
use crate::schema::ResourceReq;

/// Bundle path of the script that drives a job on the simulated backend.
pub const SIM_SCRIPT_PATH: &str = "sim.json";

fn default_stream() -> LogStream {
    LogStream::Stdout
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimAction {
    Log {
        text: String,
        #[serde(default = "default_stream")]
        stream: LogStream,
    },
    Exit {
        code: i32,
    },
    /// Create a file in the rank's virtual working directory.
    Write {
        path: String,
        content: String,
    },
    /// Fail provisioning, optionally only on the named backend.
    ProvisionFail {
        #[serde(default)]
        backend: Option<String>,
    },
}

/// One scripted step. `at` counts seconds of active (unsuspended) runtime
/// since the job started. A step without `rank` applies to every rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    #[serde(default)]
    pub rank: Option<u32>,
    #[serde(default)]
    pub at: f64,
    #[serde(flatten)]
    pub action: SimAction,
}

/// A job script: a JSON list of steps. Ranks without an `exit` step exit
/// with code 0 once they have run for the job's walltime estimate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimScript {
    pub steps: Vec<SimStep>,
}

impl SimScript {
    pub fn parse(text: &str) -> Result<SimScript, serde_json::Error> {
        Ok(SimScript { steps: serde_json::from_str(text)? })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.steps).expect("steps serialize")
    }

    fn from_bundle(manifest: &BundleManifest, store: &dyn ObjectStore) -> Result<SimScript, String> {
        let Some(entry) = manifest.entries.iter().find(|e| e.path == SIM_SCRIPT_PATH) else {
            return Ok(SimScript::default());
        };
        let mut bytes = Vec::new();
        for chunk in &entry.chunks {
            match store.get_object(&chunk.id) {
                Ok(Some(b)) => bytes.extend(b),
                Ok(None) => return Err(format!("missing object {}", chunk.id)),
                Err(e) => return Err(e.to_string()),
            }
        }
        let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
        SimScript::parse(&text).map_err(|e| format!("bad {SIM_SCRIPT_PATH}: {e}"))
    }
}

struct RankState {
    /// (active ms, action), in execution order.
    steps: Vec<(u64, SimAction)>,
    next: usize,
    seq: u64,
    done: bool,
    files: BTreeMap<String, Vec<u8>>,
    env: BTreeMap<String, String>,
}

struct SimJob {
    handle: TaskHandle,
    per_node: ResourceReq,
    ranks: Vec<RankState>,
    /// Active ms accumulated before the current running stretch.
    active_base_ms: u64,
    /// Virtual time the current running stretch began; `None` while suspended.
    resumed_at_ms: Option<u64>,
    /// Active ms at which the last rank terminated.
    finished_active_ms: Option<u64>,
    pending: Vec<TaskEvent>,
}

impl SimJob {
    fn active_at(&self, clock_ms: u64) -> u64 {
        match self.resumed_at_ms {
            Some(r) => self.active_base_ms + clock_ms.saturating_sub(r),
            None => self.active_base_ms,
        }
    }

    fn emit(&mut self, rank: usize, ts_ms: u64, kind: TaskEventKind) {
        let r = &mut self.ranks[rank];
        r.seq += 1;
        if kind.is_terminal() {
            r.done = true;
        }
        self.pending.push(TaskEvent { job_id: self.handle.job_id, rank: rank as u32, seq: r.seq, ts_ms, kind });
    }

    /// Run every step due by `clock_ms`.
    fn step_to(&mut self, clock_ms: u64) {
        let Some(resumed) = self.resumed_at_ms else { return };
        let limit = self.active_at(clock_ms);
        let mut due = Vec::new();
        for (rank, state) in self.ranks.iter_mut().enumerate() {
            while !state.done && state.next < state.steps.len() && state.steps[state.next].0 <= limit {
                let (at, action) = state.steps[state.next].clone();
                state.next += 1;
                let terminal = matches!(action, SimAction::Exit { .. });
                due.push((resumed + at.saturating_sub(self.active_base_ms), rank, at, action));
                if terminal {
                    break;
                }
            }
        }
        due.sort_by_key(|(ts, rank, _, _)| (*ts, *rank));
        for (ts, rank, at, action) in due {
            match action {
                SimAction::Log { text, stream } => self.emit(rank, ts, TaskEventKind::LogLine { stream, text }),
                SimAction::Exit { code } => {
                    self.emit(rank, ts, TaskEventKind::Exited { code });
                    if self.ranks.iter().all(|r| r.done) {
                        self.finished_active_ms = Some(at);
                    }
                }
                SimAction::Write { path, content } => {
                    self.ranks[rank].files.insert(path, content.into_bytes());
                }
                SimAction::ProvisionFail { .. } => {}
            }
        }
    }

    fn live_ranks(&self) -> usize {
        self.ranks.iter().filter(|r| !r.done).count()
    }
}

#[derive(Default)]
struct SimState {
    clock_ms: u64,
    jobs: BTreeMap<JobId, SimJob>,
    forced_down: bool,
    injected_failures: u32,
    provisions: u64,
}

/// Deterministic virtual cluster. Time only moves through [`advance_to`].
///
/// [`advance_to`]: Backend::advance_to
pub struct SimulatedBackend {
    name: String,
    max: ResourceReq,
    state: Mutex<SimState>,
}

impl SimulatedBackend {
    pub fn new(name: impl Into<String>, max: ResourceReq) -> Self {
        SimulatedBackend { name: name.into(), max, state: Mutex::new(SimState::default()) }
    }

    /// Make the backend refuse provisioning and fail probes until restored.
    pub fn set_down(&self, down: bool) {
        self.state.lock().unwrap().forced_down = down;
    }

    /// Fail the next `n` provisioning attempts.
    pub fn inject_provision_failures(&self, n: u32) {
        self.state.lock().unwrap().injected_failures += n;
    }

    /// Number of successful provisions so far.
    pub fn provisions(&self) -> u64 {
        self.state.lock().unwrap().provisions
    }

    /// The environment a rank was started with.
    pub fn rank_env(&self, job: JobId, rank: u32) -> Option<BTreeMap<String, String>> {
        let state = self.state.lock().unwrap();
        state.jobs.get(&job).and_then(|j| j.ranks.get(rank as usize)).map(|r| r.env.clone())
    }

    pub fn clock_ms(&self) -> u64 {
        self.state.lock().unwrap().clock_ms
    }
}

impl Backend for SimulatedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: self.name.clone(),
            kind: BackendKind::Simulated,
            capabilities: Capabilities { max: self.max, features: [FEATURE_MULTI_NODE.to_string()].into() },
            health: if self.state.lock().unwrap().forced_down { Health::Down } else { Health::Up },
        }
    }

    fn provision(&self, req: &ProvisionRequest<'_>) -> Result<TaskHandle, ExecError> {
        let first_node = req.placement.first().cloned().unwrap_or_default();
        let mut state = self.state.lock().unwrap();
        state.clock_ms = state.clock_ms.max(req.now_s * 1000);
        if state.forced_down {
            return Err(ExecError::ProvisionFailed { node: first_node, cause: format!("backend {} is down", self.name) });
        }
        if state.injected_failures > 0 {
            state.injected_failures -= 1;
            return Err(ExecError::ProvisionFailed { node: first_node, cause: "injected provision failure".into() });
        }
        let script = SimScript::from_bundle(req.manifest, req.store)
            .map_err(|cause| ExecError::ProvisionFailed { node: first_node.clone(), cause })?;
        for step in &script.steps {
            if let SimAction::ProvisionFail { backend } = &step.action {
                if backend.as_ref().is_none_or(|b| *b == self.name) {
                    let rank = step.rank.unwrap_or(0) as usize;
                    let node = req.placement.get(rank).cloned().unwrap_or(first_node);
                    return Err(ExecError::ProvisionFailed { node, cause: "scripted provision failure".into() });
                }
            }
        }
        if state.jobs.contains_key(&req.job_id) {
            return Err(ExecError::ProvisionFailed { node: first_node, cause: "job already provisioned".into() });
        }

        let nodes = req.placement.len();
        let default_exit_ms = req.spec.walltime_estimate_s * 1000;
        let mut ranks = Vec::with_capacity(nodes);
        for rank in 0..nodes {
            let mut steps: Vec<(u64, SimAction)> = script
                .steps
                .iter()
                .filter(|s| s.rank.is_none_or(|r| r as usize == rank))
                .filter(|s| !matches!(s.action, SimAction::ProvisionFail { .. }))
                .map(|s| ((s.at.max(0.0) * 1000.0).round() as u64, s.action.clone()))
                .collect();
            if !steps.iter().any(|(_, a)| matches!(a, SimAction::Exit { .. })) {
                steps.push((default_exit_ms, SimAction::Exit { code: 0 }));
            }
            // Stable: steps at the same instant keep script order.
            steps.sort_by_key(|(at, _)| *at);
            ranks.push(RankState {
                steps,
                next: 0,
                seq: 0,
                done: false,
                files: BTreeMap::new(),
                env: req.rank_env(rank),
            });
        }

        let clock = state.clock_ms;
        let handle = TaskHandle {
            job_id: req.job_id,
            backend: self.name.clone(),
            runners: (0..nodes).map(|r| format!("{}/{}/{}", self.name, req.placement[r], req.job_id)).collect(),
            start_time_s: clock / 1000,
        };
        let mut job = SimJob {
            handle: handle.clone(),
            per_node: req.spec.resources,
            ranks,
            active_base_ms: 0,
            resumed_at_ms: Some(clock),
            finished_active_ms: None,
            pending: Vec::new(),
        };
        for rank in 0..nodes {
            job.emit(rank, clock, TaskEventKind::Started);
        }
        job.step_to(clock);
        state.jobs.insert(req.job_id, job);
        state.provisions += 1;
        Ok(handle)
    }

    fn poll(&self, handle: &TaskHandle) -> Vec<TaskEvent> {
        let mut state = self.state.lock().unwrap();
        match state.jobs.get_mut(&handle.job_id) {
            Some(job) => {
                let mut events = std::mem::take(&mut job.pending);
                events.sort_by_key(|e| (e.ts_ms, e.rank, e.seq));
                events
            }
            None => Vec::new(),
        }
    }

    fn advance_to(&self, now_s: u64) {
        let mut state = self.state.lock().unwrap();
        state.clock_ms = state.clock_ms.max(now_s * 1000);
        let clock = state.clock_ms;
        for job in state.jobs.values_mut() {
            job.step_to(clock);
        }
    }

    fn preempt(&self, handle: &TaskHandle, _grace_s: u64) -> PreemptAck {
        let mut state = self.state.lock().unwrap();
        let clock = state.clock_ms;
        let Some(job) = state.jobs.get_mut(&handle.job_id) else {
            return PreemptAck::new(true, 0.0, &ResourceReq::ZERO, 0);
        };
        job.step_to(clock);
        let nodes = job.ranks.len();
        if let Some(finished) = job.finished_active_ms {
            return PreemptAck::new(true, finished as f64 / 1000.0, &job.per_node, nodes);
        }
        let active = job.active_at(clock);
        for rank in 0..nodes {
            if !job.ranks[rank].done {
                job.emit(rank, clock, TaskEventKind::Failed { cause: "stopped".into() });
            }
        }
        job.active_base_ms = active;
        job.resumed_at_ms = None;
        job.finished_active_ms = Some(active);
        PreemptAck::new(false, active as f64 / 1000.0, &job.per_node, nodes)
    }

    fn suspend(&self, handle: &TaskHandle) {
        let mut state = self.state.lock().unwrap();
        let clock = state.clock_ms;
        if let Some(job) = state.jobs.get_mut(&handle.job_id) {
            job.step_to(clock);
            job.active_base_ms = job.active_at(clock);
            job.resumed_at_ms = None;
        }
    }

    fn resume(&self, handle: &TaskHandle) {
        let mut state = self.state.lock().unwrap();
        let clock = state.clock_ms;
        if let Some(job) = state.jobs.get_mut(&handle.job_id) {
            if job.resumed_at_ms.is_none() && job.live_ranks() > 0 {
                job.resumed_at_ms = Some(clock);
            }
        }
    }

    fn fetch(&self, handle: &TaskHandle, pattern: &str) -> Result<Vec<FetchedFile>, ExecError> {
        let matcher = glob_matcher(pattern)?;
        let state = self.state.lock().unwrap();
        let job = state.jobs.get(&handle.job_id).ok_or(ExecError::UnknownHandle(handle.job_id))?;
        let mut out = Vec::new();
        for (rank, r) in job.ranks.iter().enumerate() {
            for (path, bytes) in r.files.iter().filter(|(p, _)| matcher.is_match(p.as_str())) {
                out.push(FetchedFile { rank: rank as u32, path: path.clone(), bytes: bytes.clone() });
            }
        }
        Ok(out)
    }

    fn release(&self, handle: &TaskHandle) -> Result<(), ExecError> {
        self.state.lock().unwrap().jobs.remove(&handle.job_id);
        Ok(())
    }

    fn probe(&self) -> bool {
        !self.state.lock().unwrap().forced_down
    }

    fn live_runners(&self) -> usize {
        self.state.lock().unwrap().jobs.values().map(SimJob::live_ranks).sum()
    }
}
