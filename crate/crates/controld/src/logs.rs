//! Per-job merged log streams.
//!
//! Lines from all ranks of a job are merged into one sequence ordered by
//! (backend timestamp, rank, per-rank seq) and numbered from 1. Readers
//! resume with `since_seq` and block on a condition variable for new lines.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use tacc_core::exec::{TaskEvent, TaskEventKind};
use tacc_core::JobId;
use tacc_proto::messages::LogLine;

#[derive(Default)]
struct JobLog {
    lines: Vec<LogLine>,
    closed: bool,
}

#[derive(Default)]
pub struct LogHub {
    jobs: Mutex<BTreeMap<JobId, JobLog>>,
    changed: Condvar,
}

impl LogHub {
    pub fn new() -> Self {
        LogHub::default()
    }

    /// Append the log lines among `events`, which must already be sorted by
    /// (ts, rank, seq).
    pub fn push(&self, job: JobId, events: &[TaskEvent]) {
        let mut jobs = self.jobs.lock().unwrap();
        let log = jobs.entry(job).or_default();
        let mut added = false;
        for e in events {
            if let TaskEventKind::LogLine { stream, text } = &e.kind {
                let seq = log.lines.len() as u64 + 1;
                log.lines.push(LogLine {
                    seq,
                    ts: e.ts_ms,
                    rank: e.rank,
                    stream: stream.as_str().to_string(),
                    line: text.clone(),
                });
                added = true;
            }
        }
        if added {
            self.changed.notify_all();
        }
    }

    /// No more lines will arrive for the current run of `job`.
    pub fn close(&self, job: JobId) {
        self.jobs.lock().unwrap().entry(job).or_default().closed = true;
        self.changed.notify_all();
    }

    /// A re-run after preemption appends to the same stream.
    pub fn reopen(&self, job: JobId) {
        if let Some(log) = self.jobs.lock().unwrap().get_mut(&job) {
            log.closed = false;
        }
    }

    pub fn forget(&self, job: JobId) {
        self.jobs.lock().unwrap().remove(&job);
    }

    /// Lines with seq greater than `since_seq`, and whether the stream is
    /// closed.
    pub fn since(&self, job: JobId, since_seq: u64) -> (Vec<LogLine>, bool) {
        let jobs = self.jobs.lock().unwrap();
        match jobs.get(&job) {
            Some(log) => (log.lines.iter().skip(since_seq as usize).cloned().collect(), log.closed),
            None => (Vec::new(), false),
        }
    }

    /// Like [`since`](LogHub::since) but waits up to `timeout` for news.
    pub fn wait_since(&self, job: JobId, since_seq: u64, timeout: Duration) -> (Vec<LogLine>, bool) {
        let jobs = self.jobs.lock().unwrap();
        let has_news =
            |jobs: &BTreeMap<JobId, JobLog>| jobs.get(&job).is_some_and(|l| l.lines.len() as u64 > since_seq || l.closed);
        let jobs = if has_news(&jobs) {
            jobs
        } else {
            self.changed.wait_timeout_while(jobs, timeout, |j| !has_news(j)).unwrap().0
        };
        match jobs.get(&job) {
            Some(log) => (log.lines.iter().skip(since_seq as usize).cloned().collect(), log.closed),
            None => (Vec::new(), false),
        }
    }

    pub fn notify(&self) {
        self.changed.notify_all();
    }
}
