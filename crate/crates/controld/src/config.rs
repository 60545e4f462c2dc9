use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tacc_core::exec::{BackendKind, SelectionRules};
use tacc_core::sched::Policy;
use tacc_core::schema::ResourceReq;

use crate::eventlog::DEFAULT_SNAPSHOT_EVERY;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    Wall,
    /// One second per tick, for simulation.
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub cpus: u32,
    #[serde(default)]
    pub gpus: u32,
    pub mem_mib: u64,
}

impl NodeConfig {
    pub fn capacity(&self) -> ResourceReq {
        ResourceReq::new(self.cpus, self.gpus, self.mem_mib)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    pub kind: BackendKind,
}

/// Contents of `controld.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    pub listen: String,
    pub clock: ClockKind,
    pub tick_ms: u64,
    pub nodes: Vec<NodeConfig>,
    pub backends: Vec<BackendConfig>,
    pub policy: Policy,
    /// Read instead of `policy` when set; relative to the config file.
    pub policy_file: Option<PathBuf>,
    pub selection: SelectionRules,
    /// How long terminal jobs keep their working directories.
    pub retention_s: u64,
    pub probe_interval_s: u64,
    pub snapshot_every: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: PathBuf::from("controld-data"),
            listen: "127.0.0.1:7878".into(),
            clock: ClockKind::Wall,
            tick_ms: 1000,
            nodes: vec![NodeConfig { name: "node0".into(), cpus: 8, gpus: 0, mem_mib: 16 * 1024 }],
            backends: vec![BackendConfig { name: "local".into(), kind: BackendKind::LocalProcess }],
            policy: Policy::default(),
            policy_file: None,
            selection: SelectionRules::default(),
            retention_s: 24 * 3600,
            probe_interval_s: 30,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.into(), source });
        let text = read(path)?;
        let mut config: Config =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(pf) = &config.policy_file {
            let pf = base.join(pf);
            config.policy =
                Policy::from_json(&read(&pf)?).map_err(|source| ConfigError::Parse { path: pf.clone(), source })?;
        }
        if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.nodes.is_empty() {
            return invalid("at least one node is required".into());
        }
        if self.backends.is_empty() {
            return invalid("at least one backend is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(&n.name) {
                return invalid(format!("duplicate node name {}", n.name));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for b in &self.backends {
            if !names.insert(&b.name) {
                return invalid(format!("duplicate backend name {}", b.name));
            }
        }
        if self.tick_ms == 0 {
            return invalid("tick_ms must be positive".into());
        }
        if self.policy.quantum_s == 0 || self.policy.half_life_s <= 0.0 {
            return invalid("quantum_s and half_life_s must be positive".into());
        }
        Ok(())
    }

    /// Per-node maximum over all configured nodes, used as backend capacity.
    pub fn largest_node(&self) -> ResourceReq {
        self.nodes.iter().fold(ResourceReq::ZERO, |acc, n| acc.component_max(&n.capacity()))
    }
}
