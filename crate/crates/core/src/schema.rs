//! Task descriptions: parsing, validation against cluster limits, and the
//! canonical form that gives every task a stable identity hash.
//!
//! The on-disk format is a strict JSON document (`task.json`). Unknown keys
//! are rejected. Omitted optional fields take the defaults below, so a parsed
//! [`TaskSpec`] is always fully populated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::canonical::to_canonical_string;
use crate::digest::Digest;

pub const MAX_NAME_CHARS: usize = 128;
pub const DEFAULT_GPUS: u32 = 0;
pub const DEFAULT_NODES: u32 = 1;
pub const DEFAULT_WALLTIME_S: u64 = 3600;
pub const DEFAULT_CODE_ROOT: &str = ".";
/// Estimates above this produce a warning.
pub const LONG_WALLTIME_S: u64 = 7 * 86_400;

const TOP_LEVEL_KEYS: &[&str] = &[
    "name",
    "user",
    "resources",
    "qos",
    "code_root",
    "entrypoint",
    "datasets",
    "dependencies",
    "env",
    "runtime_preference",
    "walltime_estimate_s",
    "nodes",
];
const RESOURCE_KEYS: &[&str] = &["cpus", "gpus", "mem_mib"];

/// Per-node resource quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResourceReq {
    pub cpus: u32,
    pub gpus: u32,
    pub mem_mib: u64,
}

impl fmt::Display for ResourceReq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} cpus, {} gpus, {} MiB", self.cpus, self.gpus, self.mem_mib)
    }
}

impl ResourceReq {
    pub const ZERO: ResourceReq = ResourceReq { cpus: 0, gpus: 0, mem_mib: 0 };

    pub fn new(cpus: u32, gpus: u32, mem_mib: u64) -> Self {
        ResourceReq { cpus, gpus, mem_mib }
    }

    /// Component-wise `self <= other`.
    pub fn fits_within(&self, other: &ResourceReq) -> bool {
        self.cpus <= other.cpus && self.gpus <= other.gpus && self.mem_mib <= other.mem_mib
    }

    pub fn checked_sub(&self, other: &ResourceReq) -> Option<ResourceReq> {
        Some(ResourceReq {
            cpus: self.cpus.checked_sub(other.cpus)?,
            gpus: self.gpus.checked_sub(other.gpus)?,
            mem_mib: self.mem_mib.checked_sub(other.mem_mib)?,
        })
    }

    pub fn saturating_sub(&self, other: &ResourceReq) -> ResourceReq {
        ResourceReq {
            cpus: self.cpus.saturating_sub(other.cpus),
            gpus: self.gpus.saturating_sub(other.gpus),
            mem_mib: self.mem_mib.saturating_sub(other.mem_mib),
        }
    }

    pub fn add(&self, other: &ResourceReq) -> ResourceReq {
        ResourceReq {
            cpus: self.cpus + other.cpus,
            gpus: self.gpus + other.gpus,
            mem_mib: self.mem_mib + other.mem_mib,
        }
    }

    pub fn component_max(&self, other: &ResourceReq) -> ResourceReq {
        ResourceReq {
            cpus: self.cpus.max(other.cpus),
            gpus: self.gpus.max(other.gpus),
            mem_mib: self.mem_mib.max(other.mem_mib),
        }
    }

    /// `(field name, requested, available)` triples, for error reporting.
    fn components(&self) -> [(&'static str, u64); 3] {
        [
            ("cpus", u64::from(self.cpus)),
            ("gpus", u64::from(self.gpus)),
            ("mem_mib", self.mem_mib),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qos {
    High,
    Normal,
    Preemptible,
}

impl Qos {
    pub fn as_str(&self) -> &'static str {
        match self {
            Qos::High => "high",
            Qos::Normal => "normal",
            Qos::Preemptible => "preemptible",
        }
    }

    fn parse(s: &str) -> Option<Qos> {
        match s {
            "high" => Some(Qos::High),
            "normal" => Some(Qos::Normal),
            "preemptible" => Some(Qos::Preemptible),
            _ => None,
        }
    }
}

/// A fully populated task description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub user: String,
    pub resources: ResourceReq,
    pub qos: Qos,
    pub code_root: String,
    pub entrypoint: String,
    pub datasets: Vec<String>,
    pub dependencies: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub runtime_preference: Option<Vec<String>>,
    pub walltime_estimate_s: u64,
    pub nodes: u32,
}

impl TaskSpec {
    /// Minimal spec with every optional field at its default.
    pub fn minimal(name: &str, user: &str, entrypoint: &str, cpus: u32, mem_mib: u64) -> Self {
        TaskSpec {
            name: name.to_string(),
            user: user.to_string(),
            resources: ResourceReq::new(cpus, DEFAULT_GPUS, mem_mib),
            qos: Qos::Normal,
            code_root: DEFAULT_CODE_ROOT.to_string(),
            entrypoint: entrypoint.to_string(),
            datasets: Vec::new(),
            dependencies: Vec::new(),
            env: BTreeMap::new(),
            runtime_preference: None,
            walltime_estimate_s: DEFAULT_WALLTIME_S,
            nodes: DEFAULT_NODES,
        }
    }

    /// Resources summed over all requested nodes.
    pub fn total_resources(&self) -> ResourceReq {
        ResourceReq {
            cpus: self.resources.cpus * self.nodes,
            gpus: self.resources.gpus * self.nodes,
            mem_mib: self.resources.mem_mib * u64::from(self.nodes),
        }
    }

    /// Document form, with every default explicit.
    pub fn to_value(&self) -> Value {
        let mut env = Map::new();
        for (k, v) in &self.env {
            env.insert(k.clone(), Value::String(v.clone()));
        }
        serde_json::json!({
            "name": self.name,
            "user": self.user,
            "resources": {
                "cpus": self.resources.cpus,
                "gpus": self.resources.gpus,
                "mem_mib": self.resources.mem_mib,
            },
            "qos": self.qos.as_str(),
            "code_root": self.code_root,
            "entrypoint": self.entrypoint,
            "datasets": self.datasets,
            "dependencies": self.dependencies,
            "env": Value::Object(env),
            "runtime_preference": self.runtime_preference,
            "walltime_estimate_s": self.walltime_estimate_s,
            "nodes": self.nodes,
        })
    }
}

/// Parse failure: where in the document, and why.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("SCHEMA_INVALID at `{path}`: {reason}")]
pub struct SchemaError {
    pub path: String,
    pub reason: String,
}

impl SchemaError {
    fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        SchemaError { path: path.into(), reason: reason.into() }
    }
}

/// Parse a `task.json` document.
pub fn parse_task_spec(document: &str) -> Result<TaskSpec, SchemaError> {
    let value: Value = serde_json::from_str(document)
        .map_err(|e| SchemaError::new("$", format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| SchemaError::new("$", "document must be a JSON object"))?;
    reject_unknown(obj, TOP_LEVEL_KEYS, "")?;

    let name = required_str(obj, "name", "name")?;
    if name.is_empty() {
        return Err(SchemaError::new("name", "must not be empty"));
    }
    if name.chars().count() > MAX_NAME_CHARS {
        return Err(SchemaError::new("name", format!("longer than {MAX_NAME_CHARS} characters")));
    }
    let user = required_str(obj, "user", "user")?;
    if user.is_empty() {
        return Err(SchemaError::new("user", "must not be empty"));
    }

    let resources = parse_resources(obj.get("resources"))?;

    let qos = match obj.get("qos") {
        None | Some(Value::Null) => Qos::Normal,
        Some(Value::String(s)) => Qos::parse(s).ok_or_else(|| {
            SchemaError::new("qos", format!("unknown QoS class `{s}` (expected high, normal or preemptible)"))
        })?,
        Some(_) => return Err(SchemaError::new("qos", "expected a string")),
    };

    let code_root = optional_str(obj, "code_root")?.unwrap_or_else(|| DEFAULT_CODE_ROOT.to_string());
    if code_root.is_empty() {
        return Err(SchemaError::new("code_root", "must not be empty"));
    }
    check_relative(&code_root, "code_root")?;

    let entrypoint = required_str(obj, "entrypoint", "entrypoint")?;
    if entrypoint.trim().is_empty() {
        return Err(SchemaError::new("entrypoint", "must not be empty"));
    }

    let datasets = string_list(obj, "datasets")?.unwrap_or_default();
    for (i, d) in datasets.iter().enumerate() {
        if !d.contains("://") {
            check_relative(d, &format!("datasets[{i}]"))?;
        }
    }
    let dependencies = string_list(obj, "dependencies")?.unwrap_or_default();

    let env = match obj.get("env") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(Value::Object(map)) => {
            let mut env = BTreeMap::new();
            for (k, v) in map {
                if !is_env_key(k) {
                    return Err(SchemaError::new(
                        format!("env.{k}"),
                        "variable names must match [A-Za-z_][A-Za-z0-9_]*",
                    ));
                }
                let v = v
                    .as_str()
                    .ok_or_else(|| SchemaError::new(format!("env.{k}"), "expected a string value"))?;
                env.insert(k.clone(), v.to_string());
            }
            env
        }
        Some(_) => return Err(SchemaError::new("env", "expected an object")),
    };

    let runtime_preference = string_list(obj, "runtime_preference")?;
    if let Some(prefs) = &runtime_preference {
        let mut seen = BTreeSet::new();
        for (i, p) in prefs.iter().enumerate() {
            if !seen.insert(p.as_str()) {
                return Err(SchemaError::new(
                    format!("runtime_preference[{i}]"),
                    format!("duplicate backend `{p}`"),
                ));
            }
        }
    }

    let walltime_estimate_s =
        positive_int(obj.get("walltime_estimate_s"), "walltime_estimate_s")?.unwrap_or(DEFAULT_WALLTIME_S);
    let nodes = match positive_int(obj.get("nodes"), "nodes")? {
        None => DEFAULT_NODES,
        Some(n) => u32::try_from(n).map_err(|_| SchemaError::new("nodes", "out of range"))?,
    };

    Ok(TaskSpec {
        name,
        user,
        resources,
        qos,
        code_root,
        entrypoint,
        datasets,
        dependencies,
        env,
        runtime_preference,
        walltime_estimate_s,
        nodes,
    })
}

fn parse_resources(value: Option<&Value>) -> Result<ResourceReq, SchemaError> {
    let obj = match value {
        None => return Err(SchemaError::new("resources", "required field is missing")),
        Some(Value::Object(obj)) => obj,
        Some(_) => return Err(SchemaError::new("resources", "expected an object")),
    };
    reject_unknown(obj, RESOURCE_KEYS, "resources.")?;
    let cpus = positive_int(obj.get("cpus"), "resources.cpus")?
        .ok_or_else(|| SchemaError::new("resources.cpus", "required field is missing"))?;
    let gpus = non_negative_int(obj.get("gpus"), "resources.gpus")?.unwrap_or(u64::from(DEFAULT_GPUS));
    let mem_mib = positive_int(obj.get("mem_mib"), "resources.mem_mib")?
        .ok_or_else(|| SchemaError::new("resources.mem_mib", "required field is missing"))?;
    Ok(ResourceReq {
        cpus: u32::try_from(cpus).map_err(|_| SchemaError::new("resources.cpus", "out of range"))?,
        gpus: u32::try_from(gpus).map_err(|_| SchemaError::new("resources.gpus", "out of range"))?,
        mem_mib,
    })
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str], prefix: &str) -> Result<(), SchemaError> {
    // Sorted so the reported key does not depend on map iteration order.
    let mut keys: Vec<&String> = obj.keys().collect();
    keys.sort();
    for key in keys {
        if !allowed.contains(&key.as_str()) {
            return Err(SchemaError::new(format!("{prefix}{key}"), "unknown field"));
        }
    }
    Ok(())
}

fn required_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(SchemaError::new(path, "required field is missing")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(SchemaError::new(path, "expected a string")),
    }
}

fn optional_str(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(SchemaError::new(key, "expected a string")),
    }
}

fn string_list(obj: &Map<String, Value>, key: &str) -> Result<Option<Vec<String>>, SchemaError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                item.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| SchemaError::new(format!("{key}[{i}]"), "expected a string"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(SchemaError::new(key, "expected an array of strings")),
    }
}

fn non_negative_int(value: Option<&Value>, path: &str) -> Result<Option<u64>, SchemaError> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(Some)
            .ok_or_else(|| SchemaError::new(path, format!("expected a non-negative integer, got {n}"))),
        Some(_) => Err(SchemaError::new(path, "expected an integer")),
    }
}

fn positive_int(value: Option<&Value>, path: &str) -> Result<Option<u64>, SchemaError> {
    match non_negative_int(value, path)? {
        Some(0) => Err(SchemaError::new(path, "must be at least 1")),
        other => Ok(other),
    }
}

fn check_relative(path: &str, field: &str) -> Result<(), SchemaError> {
    if path.starts_with('/') {
        return Err(SchemaError::new(field, "must be relative to the submission workspace"));
    }
    if path.split('/').any(|c| c == "..") {
        return Err(SchemaError::new(field, "must not contain `..`"));
    }
    Ok(())
}

fn is_env_key(key: &str) -> bool {
    let mut chars = key.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Capacities the validator checks a spec against.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLimits {
    pub nodes: Vec<ResourceReq>,
}

impl ClusterLimits {
    pub fn new(nodes: Vec<ResourceReq>) -> Self {
        ClusterLimits { nodes }
    }

    /// Component-wise maximum over all nodes.
    pub fn largest_node(&self) -> ResourceReq {
        self.nodes.iter().fold(ResourceReq::ZERO, |acc, n| acc.component_max(n))
    }

    pub fn total(&self) -> ResourceReq {
        self.nodes.iter().fold(ResourceReq::ZERO, |acc, n| acc.add(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: String,
    pub field_path: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn from_issues(issues: Vec<Issue>) -> Self {
        let ok = !issues.iter().any(|i| i.severity == Severity::Error);
        ValidationReport { ok, issues }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{} at `{}`: {}", issue.code, issue.field_path, issue.message)?;
        }
        Ok(())
    }
}

/// Check a parsed spec against the cluster's capacities.
pub fn validate(spec: &TaskSpec, limits: &ClusterLimits) -> ValidationReport {
    let mut issues = Vec::new();
    let mut unsatisfiable = |path: String, message: String| {
        issues.push(Issue { severity: Severity::Error, code: "UNSATISFIABLE".into(), field_path: path, message })
    };

    let req = spec.resources;
    let largest = limits.largest_node();
    let mut per_node_ok = true;
    for ((field, want), (_, have)) in req.components().into_iter().zip(largest.components()) {
        if want > have {
            per_node_ok = false;
            unsatisfiable(
                format!("resources.{field}"),
                format!("requests {want} per node but the largest node has {have}"),
            );
        }
    }

    let fitting_nodes = limits.nodes.iter().filter(|n| req.fits_within(n)).count();
    if per_node_ok && fitting_nodes == 0 {
        unsatisfiable("resources".into(), "no single node satisfies every component of the request".into());
    }

    let total = limits.total();
    let nodes = u64::from(spec.nodes);
    for ((field, want), (_, have)) in req.components().into_iter().zip(total.components()) {
        if want * nodes > have {
            unsatisfiable(
                format!("resources.{field}"),
                format!("{nodes} nodes x {want} = {} exceeds cluster total {have}", want * nodes),
            );
        }
    }

    if per_node_ok && fitting_nodes > 0 && (spec.nodes as usize) > fitting_nodes {
        unsatisfiable(
            "nodes".into(),
            format!("requests {} nodes but only {fitting_nodes} can hold the per-node request", spec.nodes),
        );
    }

    if spec.walltime_estimate_s > LONG_WALLTIME_S {
        issues.push(Issue {
            severity: Severity::Warning,
            code: "LONG_WALLTIME".into(),
            field_path: "walltime_estimate_s".into(),
            message: format!("estimate of {} s exceeds 7 days", spec.walltime_estimate_s),
        });
    }

    ValidationReport::from_issues(issues)
}

/// Canonical text of a spec and its SHA-256.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canonical {
    pub text: String,
    pub spec_hash: Digest,
}

/// Sorted keys, no insignificant whitespace, explicit defaults, NFC strings,
/// terminated by a single LF.
pub fn canonicalize(spec: &TaskSpec) -> Canonical {
    let mut text = to_canonical_string(&spec.to_value());
    text.push('\n');
    let spec_hash = Digest::of(text.as_bytes());
    Canonical { text, spec_hash }
}
