//! Message type names and payload bodies.

use serde::{Deserialize, Serialize};
use tacc_core::exec::SelectionTrace;
use tacc_core::{Digest, ErrorCode, JobId};

pub const MSG_HELLO: &str = "HELLO";
pub const MSG_CAS_CHECK: &str = "CAS_CHECK";
pub const MSG_CAS_PUT: &str = "CAS_PUT";
pub const MSG_SUBMIT: &str = "SUBMIT";
pub const MSG_LIST: &str = "LIST";
pub const MSG_STATUS: &str = "STATUS";
pub const MSG_LOGS: &str = "LOGS";
pub const MSG_FETCH: &str = "FETCH";
pub const MSG_KILL: &str = "KILL";
pub const MSG_ERROR: &str = "ERROR";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub error: ErrorBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u32,
    #[serde(default)]
    pub client: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloReply {
    pub version: u32,
    pub server: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasCheck {
    pub hashes: Vec<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasCheckReply {
    pub missing: Vec<Digest>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CasKind {
    Object,
    Manifest,
}

/// Precedes the binary frame of a `CAS_PUT`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasPut {
    pub kind: CasKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasPutReply {
    /// Object digest, or the bundle id for manifests.
    pub id: Digest,
    pub stored: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submit {
    pub spec_doc: String,
    /// Bundle id of a manifest already in the controller's store.
    pub manifest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReply {
    pub job_id: JobId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    /// State names, e.g. `Running`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct List {
    #[serde(default)]
    pub filter: ListFilter,
}

/// What `LIST` and `STATUS` report per job.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: JobId,
    pub name: String,
    pub user: String,
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub submit_time_s: u64,
    /// Controller clock when the summary was produced.
    pub now_s: u64,
    pub nodes: u32,
    #[serde(default)]
    pub placement: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    /// Per-rank exit codes; `null` while a rank is running.
    #[serde(default)]
    pub exit_codes: Vec<Option<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionTrace>,
    pub spec_hash: Digest,
    pub bundle_id: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListReply {
    pub jobs: Vec<JobSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRef {
    pub job_id: JobId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Logs {
    pub job_id: JobId,
    #[serde(default)]
    pub follow: bool,
    /// Only lines with a larger sequence number are sent.
    #[serde(default)]
    pub since_seq: u64,
}

/// One merged log line. `seq` is the job-wide merge position, from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub seq: u64,
    pub ts: u64,
    pub rank: u32,
    pub stream: String,
    pub line: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogFrame {
    Eof { eof: bool },
    Line(LogLine),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fetch {
    pub job_id: JobId,
    pub glob: String,
}

/// Precedes the archive's binary frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReply {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillReply {
    pub job_id: JobId,
    pub state: String,
}
