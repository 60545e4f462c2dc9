//! Client configuration: named controller endpoints and the current one.
//!
//! The file is pretty-printed JSON with sorted keys, so `current` sits on a
//! line of its own and switching clusters rewrites exactly that line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tacc_proto::Endpoint;

pub const CONFIG_ENV: &str = "TCLOUD_CONFIG";
pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7878";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDefaults {
    /// Applied as the user filter of `status --all` when none is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    #[serde(default)]
    pub defaults: ClusterDefaults,
    pub endpoint: String,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub clusters: Vec<Cluster>,
    pub current: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("no cluster named `{0}` in the config")]
    UnknownCluster(String),
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            clusters: vec![Cluster {
                defaults: ClusterDefaults::default(),
                endpoint: DEFAULT_ENDPOINT.into(),
                name: "local".into(),
            }],
            current: "local".into(),
        }
    }
}

/// `$TCLOUD_CONFIG`, else `~/.config/tcloud/config.json`.
pub fn config_path() -> PathBuf {
    if let Some(p) = std::env::var_os(CONFIG_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
    home.join(".config").join("tcloud").join("config.json")
}

impl ClusterConfig {
    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn parse(text: &str, path: &Path) -> Result<ClusterConfig, ConfigError> {
        let config: ClusterConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::Invalid { path: path.into(), message: e.to_string() })?;
        config.check().map_err(|message| ConfigError::Invalid { path: path.into(), message })?;
        Ok(config)
    }

    fn check(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.clusters {
            if !seen.insert(c.name.as_str()) {
                return Err(format!("duplicate cluster name `{}`", c.name));
            }
            c.endpoint.parse::<Endpoint>().map_err(|e| format!("cluster `{}`: {e}", c.name))?;
        }
        if !seen.contains(self.current.as_str()) {
            return Err(format!("current cluster `{}` is not configured", self.current));
        }
        Ok(())
    }

    /// Read the config, creating it with defaults if absent.
    pub fn load_or_create(path: &Path) -> Result<ClusterConfig, ConfigError> {
        let io = |source| ConfigError::Io { path: path.into(), source };
        match std::fs::read_to_string(path) {
            Ok(text) => ClusterConfig::parse(&text, path),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let config = ClusterConfig::default();
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(io)?;
                }
                std::fs::write(path, config.to_text()).map_err(io)?;
                Ok(config)
            }
            Err(e) => Err(io(e)),
        }
    }

    pub fn cluster(&self, name: &str) -> Result<&Cluster, ConfigError> {
        self.clusters.iter().find(|c| c.name == name).ok_or_else(|| ConfigError::UnknownCluster(name.into()))
    }

    pub fn current(&self) -> &Cluster {
        self.cluster(&self.current).expect("checked on load")
    }
}

/// Point `current` at `name`, changing only that line of the file.
pub fn use_cluster(path: &Path, name: &str) -> Result<(), ConfigError> {
    let io = |source| ConfigError::Io { path: path.into(), source };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let config = ClusterConfig::parse(&text, path)?;
    config.cluster(name)?;
    let line = format!("  \"current\": {}", serde_json::to_string(name).expect("string serializes"));
    let mut replaced = false;
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            if !replaced && l.trim_start().starts_with("\"current\":") {
                replaced = true;
                let comma = if l.trim_end().ends_with(',') { "," } else { "" };
                format!("{line}{comma}")
            } else {
                l.to_string()
            }
        })
        .collect();
    let mut out = lines.join("\n");
    if text.ends_with('\n') {
        out.push('\n');
    }
    // A hand-edited file without a `current` line of its own is rewritten.
    let updated = match ClusterConfig::parse(&out, path) {
        Ok(c) if replaced && c.current == name => out,
        _ => ClusterConfig { current: name.into(), ..config }.to_text(),
    };
    std::fs::write(path, updated).map_err(io)
}
