use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::{
    glob_matcher, Backend, BackendDescriptor, BackendKind, Capabilities, ExecError, FetchedFile, Health, LogStream,
    PreemptAck, ProvisionRequest, TaskEvent, TaskEventKind, TaskHandle,
};
use crate::bundle::materialize;
use crate::ids::JobId;
use crate::schema::ResourceReq;

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Default)]
struct Sink {
    events: Vec<TaskEvent>,
    seqs: Vec<u64>,
    live: Vec<bool>,
}

/// Events shared between a job's reader/waiter threads and the poller.
#[derive(Default)]
struct JobShared {
    sink: Mutex<Sink>,
    exited: Condvar,
}

impl JobShared {
    fn push(&self, job_id: JobId, rank: u32, kind: TaskEventKind) {
        let mut sink = self.sink.lock().unwrap();
        let terminal = kind.is_terminal();
        sink.seqs[rank as usize] += 1;
        let seq = sink.seqs[rank as usize];
        sink.events.push(TaskEvent { job_id, rank, seq, ts_ms: now_ms(), kind });
        if terminal {
            sink.live[rank as usize] = false;
            self.exited.notify_all();
        }
    }

    fn live(&self) -> usize {
        self.sink.lock().unwrap().live.iter().filter(|l| **l).count()
    }
}

struct LocalJob {
    shared: Arc<JobShared>,
    pgids: Vec<i32>,
    dir: PathBuf,
    per_node: ResourceReq,
    started: Instant,
    /// Time spent suspended so far, and the start of an ongoing suspension.
    suspended_for: Duration,
    suspended_at: Option<Instant>,
    stopped_active: Option<f64>,
}

impl LocalJob {
    fn active_s(&self) -> f64 {
        let paused = self.suspended_for + self.suspended_at.map_or(Duration::ZERO, |t| t.elapsed());
        self.started.elapsed().saturating_sub(paused).as_secs_f64()
    }

    fn signal(&self, sig: i32) {
        for &pgid in &self.pgids {
            // SAFETY: kill(2) has no memory-safety preconditions; a stale
            // process group yields ESRCH, which is ignored.
            unsafe {
                libc::kill(-pgid, sig);
            }
        }
    }
}

/// Runs each rank's entrypoint with `sh -c` in its own process group, in a
/// fresh working directory `<root>/<job>/rank<k>`. All ranks run on this
/// host; node names only label the ranks.
pub struct LocalProcessBackend {
    name: String,
    root: PathBuf,
    max: ResourceReq,
    jobs: Mutex<BTreeMap<JobId, LocalJob>>,
}

impl LocalProcessBackend {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, max: ResourceReq) -> Self {
        LocalProcessBackend { name: name.into(), root: root.into(), max, jobs: Mutex::new(BTreeMap::new()) }
    }

    pub fn job_dir(&self, job: JobId) -> PathBuf {
        self.root.join(job.to_string())
    }

    fn spawn_rank(
        &self,
        req: &ProvisionRequest<'_>,
        rank: usize,
        dir: &Path,
        shared: &Arc<JobShared>,
    ) -> Result<i32, ExecError> {
        let node = req.placement[rank].clone();
        let fail = |cause: String| ExecError::ProvisionFailed { node: node.clone(), cause };
        materialize(req.manifest, req.store, dir).map_err(|e| fail(e.to_string()))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&req.spec.entrypoint)
            .current_dir(dir)
            .envs(req.rank_env(rank))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| fail(format!("spawn failed: {e}")))?;
        let pid = child.id() as i32;
        let job_id = req.job_id;
        let rank = rank as u32;
        shared.push(job_id, rank, TaskEventKind::Started);

        let readers = [
            reader(child.stdout.take().expect("piped"), LogStream::Stdout, job_id, rank, shared.clone()),
            reader(child.stderr.take().expect("piped"), LogStream::Stderr, job_id, rank, shared.clone()),
        ];
        let shared = shared.clone();
        thread::spawn(move || waiter(child, readers, job_id, rank, shared));
        Ok(pid)
    }
}

fn reader(
    pipe: impl Read + Send + 'static,
    stream: LogStream,
    job_id: JobId,
    rank: u32,
    shared: Arc<JobShared>,
) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut lines = BufReader::new(pipe);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match lines.read_until(b'\n', &mut buf) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    if buf.last() == Some(&b'\n') {
                        buf.pop();
                    }
                    let text = String::from_utf8_lossy(&buf).into_owned();
                    shared.push(job_id, rank, TaskEventKind::LogLine { stream, text });
                }
            }
        }
    })
}

fn waiter(mut child: Child, readers: [thread::JoinHandle<()>; 2], job_id: JobId, rank: u32, shared: Arc<JobShared>) {
    let status = child.wait();
    // Output must be fully drained before the terminal event.
    for r in readers {
        let _ = r.join();
    }
    let kind = match status {
        Ok(s) => TaskEventKind::Exited { code: s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0)) },
        Err(e) => TaskEventKind::Failed { cause: format!("wait failed: {e}") },
    };
    shared.push(job_id, rank, kind);
}

impl Backend for LocalProcessBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: self.name.clone(),
            kind: BackendKind::LocalProcess,
            capabilities: Capabilities { max: self.max, features: [super::FEATURE_MULTI_NODE.to_string()].into() },
            health: Health::Up,
        }
    }

    fn provision(&self, req: &ProvisionRequest<'_>) -> Result<TaskHandle, ExecError> {
        let first_node = req.placement.first().cloned().unwrap_or_default();
        let dir = self.job_dir(req.job_id);
        if dir.exists() {
            return Err(ExecError::ProvisionFailed {
                node: first_node,
                cause: format!("working directory {} already exists", dir.display()),
            });
        }
        let nodes = req.placement.len();
        let shared = Arc::new(JobShared {
            sink: Mutex::new(Sink { events: Vec::new(), seqs: vec![0; nodes], live: vec![true; nodes] }),
            exited: Condvar::new(),
        });
        let mut pgids = Vec::with_capacity(nodes);
        for rank in 0..nodes {
            match self.spawn_rank(req, rank, &dir.join(format!("rank{rank}")), &shared) {
                Ok(pid) => pgids.push(pid),
                Err(e) => {
                    for &pgid in &pgids {
                        // SAFETY: see LocalJob::signal.
                        unsafe {
                            libc::kill(-pgid, libc::SIGKILL);
                        }
                    }
                    let _ = fs::remove_dir_all(&dir);
                    return Err(e);
                }
            }
        }
        let handle = TaskHandle {
            job_id: req.job_id,
            backend: self.name.clone(),
            runners: pgids.iter().map(|p| format!("pid:{p}")).collect(),
            start_time_s: req.now_s,
        };
        self.jobs.lock().unwrap().insert(
            req.job_id,
            LocalJob {
                shared,
                pgids,
                dir,
                per_node: req.spec.resources,
                started: Instant::now(),
                suspended_for: Duration::ZERO,
                suspended_at: None,
                stopped_active: None,
            },
        );
        Ok(handle)
    }

    fn poll(&self, handle: &TaskHandle) -> Vec<TaskEvent> {
        let shared = match self.jobs.lock().unwrap().get(&handle.job_id) {
            Some(job) => job.shared.clone(),
            None => return Vec::new(),
        };
        let mut events = std::mem::take(&mut shared.sink.lock().unwrap().events);
        events.sort_by_key(|e| (e.ts_ms, e.rank, e.seq));
        events
    }

    fn preempt(&self, handle: &TaskHandle, grace_s: u64) -> PreemptAck {
        let (shared, active, per_node, nodes) = {
            let mut jobs = self.jobs.lock().unwrap();
            let Some(job) = jobs.get_mut(&handle.job_id) else {
                return PreemptAck::new(true, 0.0, &ResourceReq::ZERO, 0);
            };
            if let Some(active) = job.stopped_active {
                return PreemptAck::new(true, active, &job.per_node, job.pgids.len());
            }
            let active = job.active_s();
            job.stopped_active = Some(active);
            if job.shared.live() == 0 {
                return PreemptAck::new(true, active, &job.per_node, job.pgids.len());
            }
            // A stopped group must be continued to see SIGTERM.
            job.signal(libc::SIGTERM);
            job.signal(libc::SIGCONT);
            (job.shared.clone(), active, job.per_node, job.pgids.len())
        };

        let deadline = Instant::now() + Duration::from_secs(grace_s);
        let mut sink = shared.sink.lock().unwrap();
        while sink.live.iter().any(|l| *l) {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            sink = shared.exited.wait_timeout(sink, left).unwrap().0;
        }
        let still_live = sink.live.iter().any(|l| *l);
        drop(sink);
        if still_live {
            if let Some(job) = self.jobs.lock().unwrap().get(&handle.job_id) {
                job.signal(libc::SIGKILL);
            }
        }
        PreemptAck::new(false, active, &per_node, nodes)
    }

    fn suspend(&self, handle: &TaskHandle) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(&handle.job_id) {
            if job.suspended_at.is_none() {
                job.signal(libc::SIGSTOP);
                job.suspended_at = Some(Instant::now());
            }
        }
    }

    fn resume(&self, handle: &TaskHandle) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(&handle.job_id) {
            if let Some(at) = job.suspended_at.take() {
                job.suspended_for += at.elapsed();
                job.signal(libc::SIGCONT);
            }
        }
    }

    fn fetch(&self, handle: &TaskHandle, pattern: &str) -> Result<Vec<FetchedFile>, ExecError> {
        let matcher = glob_matcher(pattern)?;
        let (dir, nodes) = {
            let jobs = self.jobs.lock().unwrap();
            let job = jobs.get(&handle.job_id).ok_or(ExecError::UnknownHandle(handle.job_id))?;
            (job.dir.clone(), job.pgids.len())
        };
        let mut out = Vec::new();
        for rank in 0..nodes {
            let rank_dir = dir.join(format!("rank{rank}"));
            for entry in walkdir::WalkDir::new(&rank_dir).sort_by_file_name() {
                let entry = entry.map_err(|e| ExecError::Io(e.into()))?;
                if !entry.file_type().is_file() {
                    continue;
                }
                let rel = entry.path().strip_prefix(&rank_dir).expect("under rank dir");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if matcher.is_match(&rel) {
                    out.push(FetchedFile { rank: rank as u32, path: rel, bytes: fs::read(entry.path())? });
                }
            }
        }
        Ok(out)
    }

    fn release(&self, handle: &TaskHandle) -> Result<(), ExecError> {
        let job = self.jobs.lock().unwrap().remove(&handle.job_id);
        if let Some(job) = job {
            if job.shared.live() > 0 {
                job.signal(libc::SIGKILL);
            }
            match fs::remove_dir_all(&job.dir) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn probe(&self) -> bool {
        fs::create_dir_all(&self.root).is_ok()
    }

    fn live_runners(&self) -> usize {
        self.jobs.lock().unwrap().values().map(|j| j.shared.live()).sum()
    }
}
