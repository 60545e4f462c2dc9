use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, BackendKind, ExecError, Health};
use crate::schema::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Schema,
    Compiler,
    Scheduling,
    Execution,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub layer: Layer,
    pub factor: String,
    pub effect: String,
}

/// The ranked backend list and the factors that produced it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub backends: Vec<String>,
    pub factors: Vec<FactorRecord>,
}

impl SelectionTrace {
    fn record(&mut self, layer: Layer, factor: &str, effect: impl Into<String>) {
        self.factors.push(FactorRecord { layer, factor: factor.to_string(), effect: effect.into() });
    }
}

pub const FACTOR_USER_PREFERENCE: &str = "user-indicated preference";
pub const FACTOR_STATIC: &str = "static characteristic: language, task size";
pub const FACTOR_RUNTIME: &str = "runtime characteristic: expected duration";
pub const FACTOR_REGISTRY_ORDER: &str = "registry order";
pub const FACTOR_FAILOVER: &str = "fail-safe switching";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StaticChars {
    pub language: Option<String>,
    pub bundle_size_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RuntimeChars {
    pub expected_duration_s: u64,
}

/// Configurable compiler- and scheduling-layer rules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionRules {
    /// Bundles larger than this prefer `local_process`.
    pub large_bundle_bytes: u64,
    /// Preferred backend kind per guessed language.
    pub language: BTreeMap<String, BackendKind>,
    /// Jobs expected to finish within this many seconds prefer `simulated`.
    /// Disabled when absent.
    pub short_duration_s: Option<u64>,
}

impl Default for SelectionRules {
    fn default() -> Self {
        SelectionRules { large_bundle_bytes: 256 << 20, language: BTreeMap::new(), short_duration_s: None }
    }
}

/// Guess the entrypoint's language from its first word and file extension.
pub fn guess_language(entrypoint: &str) -> Option<String> {
    let words: Vec<&str> = entrypoint.split_whitespace().collect();
    let first = words.first()?;
    let program = first.rsplit('/').next().unwrap_or(first);
    let lang = if program.starts_with("python") || words.iter().any(|w| w.ends_with(".py")) {
        "python"
    } else if matches!(program, "sh" | "bash") || words.iter().any(|w| w.ends_with(".sh")) {
        "shell"
    } else {
        return None;
    };
    Some(lang.to_string())
}

#[derive(Clone, Copy, Debug)]
struct HealthRecord {
    health: Health,
    down_since_s: u64,
}

/// Backends in registration order, with a shared health table.
pub struct Registry {
    backends: Vec<Arc<dyn Backend>>,
    health: Mutex<BTreeMap<String, HealthRecord>>,
    pub probe_interval_s: u64,
    pub rules: SelectionRules,
}

impl Registry {
    pub fn new(backends: Vec<Arc<dyn Backend>>) -> Self {
        let mut seen = BTreeSet::new();
        for b in &backends {
            assert!(seen.insert(b.name()), "duplicate backend name {}", b.name());
        }
        let health = backends
            .iter()
            .map(|b| (b.name(), HealthRecord { health: Health::Up, down_since_s: 0 }))
            .collect();
        Registry { backends, health: Mutex::new(health), probe_interval_s: 30, rules: SelectionRules::default() }
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Backend>> {
        self.backends.iter().find(|b| b.name() == name).cloned()
    }

    pub fn backends(&self) -> &[Arc<dyn Backend>] {
        &self.backends
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        self.backends
            .iter()
            .map(|b| {
                let mut d = b.descriptor();
                d.health = self.health(&d.name);
                d
            })
            .collect()
    }

    pub fn health(&self, name: &str) -> Health {
        self.health.lock().unwrap().get(name).map_or(Health::Down, |r| r.health)
    }

    pub fn is_up(&self, name: &str) -> bool {
        self.health(name) == Health::Up
    }

    /// Returns true if this changed the backend's health.
    pub fn mark_down(&self, name: &str, now_s: u64) -> bool {
        let mut table = self.health.lock().unwrap();
        match table.get_mut(name) {
            Some(r) if r.health == Health::Up => {
                *r = HealthRecord { health: Health::Down, down_since_s: now_s };
                true
            }
            _ => false,
        }
    }

    /// Returns true if this changed the backend's health.
    pub fn mark_up(&self, name: &str) -> bool {
        let mut table = self.health.lock().unwrap();
        match table.get_mut(name) {
            Some(r) if r.health == Health::Down => {
                r.health = Health::Up;
                true
            }
            _ => false,
        }
    }

    /// Probe backends that have been down for at least the probe interval
    /// and restore those that answer. Returns the restored names.
    pub fn probe_due(&self, now_s: u64) -> Vec<String> {
        let due: Vec<String> = {
            let table = self.health.lock().unwrap();
            table
                .iter()
                .filter(|(_, r)| r.health == Health::Down && now_s >= r.down_since_s + self.probe_interval_s)
                .map(|(n, _)| n.clone())
                .collect()
        };
        let mut restored = Vec::new();
        for name in due {
            let ok = self.get(&name).is_some_and(|b| b.probe());
            let mut table = self.health.lock().unwrap();
            let r = table.get_mut(&name).expect("registered");
            if ok {
                r.health = Health::Up;
                restored.push(name);
            } else {
                r.down_since_s = now_s;
            }
        }
        restored
    }

    /// Rank backends for a task. Layers apply in order and an earlier layer
    /// always outranks a later one: user preference, then static rules,
    /// then runtime rules, then registry order.
    pub fn select_backend(
        &self,
        spec: &TaskSpec,
        static_chars: &StaticChars,
        runtime_chars: &RuntimeChars,
    ) -> Result<SelectionTrace, ExecError> {
        let mut trace = SelectionTrace::default();
        let eligible: Vec<(usize, BackendDescriptor)> = self
            .backends
            .iter()
            .enumerate()
            .map(|(i, b)| (i, b.descriptor()))
            .filter(|(_, d)| self.is_up(&d.name) && d.capabilities.supports(spec))
            .collect();

        let prefs = spec.runtime_preference.clone().unwrap_or_default();
        let pref_rank = |d: &BackendDescriptor| prefs.iter().position(|p| p == &d.name).unwrap_or(usize::MAX);
        if prefs.is_empty() {
            trace.record(Layer::Schema, FACTOR_USER_PREFERENCE, "none given");
        } else {
            let honoured: Vec<&str> =
                prefs.iter().filter(|p| eligible.iter().any(|(_, d)| &&d.name == p)).map(String::as_str).collect();
            trace.record(
                Layer::Schema,
                FACTOR_USER_PREFERENCE,
                format!("preferred [{}]; eligible [{}]", prefs.join(", "), honoured.join(", ")),
            );
        }

        let large = static_chars.bundle_size_bytes > self.rules.large_bundle_bytes;
        let lang_pref = static_chars.language.as_ref().and_then(|l| self.rules.language.get(l)).copied();
        let static_pref = if large { Some(BackendKind::LocalProcess) } else { lang_pref };
        let mut effect = format!(
            "language={}, bundle={} B",
            static_chars.language.as_deref().unwrap_or("unknown"),
            static_chars.bundle_size_bytes
        );
        match (large, static_pref) {
            (true, _) => effect.push_str(&format!("; above {} B, prefer local_process", self.rules.large_bundle_bytes)),
            (false, Some(kind)) => effect.push_str(&format!("; language rule, prefer {}", kind.as_str())),
            (false, None) => effect.push_str("; no rule applies"),
        }
        trace.record(Layer::Compiler, FACTOR_STATIC, effect);

        let short = self.rules.short_duration_s.is_some_and(|t| runtime_chars.expected_duration_s <= t);
        let runtime_pref = short.then_some(BackendKind::Simulated);
        trace.record(
            Layer::Scheduling,
            FACTOR_RUNTIME,
            match (short, self.rules.short_duration_s) {
                (true, Some(t)) => format!("expected {} s ≤ {t} s, prefer simulated", runtime_chars.expected_duration_s),
                _ => format!("expected {} s; no rule applies", runtime_chars.expected_duration_s),
            },
        );

        let kind_rank = |pref: Option<BackendKind>, kind: BackendKind| match pref {
            Some(p) if p == kind => 0,
            Some(_) => 1,
            None => 0,
        };
        let mut ranked = eligible;
        ranked.sort_by_key(|(i, d)| {
            (pref_rank(d), kind_rank(static_pref, d.kind), kind_rank(runtime_pref, d.kind), *i)
        });
        trace.backends = ranked.into_iter().map(|(_, d)| d.name).collect();
        trace.record(Layer::Execution, FACTOR_REGISTRY_ORDER, "ties broken by registration order");

        if trace.backends.is_empty() {
            return Err(ExecError::BackendUnavailable(format!(
                "no healthy backend can run {} node(s) of {}",
                spec.nodes, spec.resources
            )));
        }
        Ok(trace)
    }

    /// After `failed` could not provision, mark it down and return the next
    /// backend in the trace that is healthy and not yet attempted.
    pub fn failover(
        &self,
        trace: &mut SelectionTrace,
        failed: &str,
        attempted: &BTreeSet<String>,
        now_s: u64,
    ) -> Option<String> {
        self.mark_down(failed, now_s);
        let next = trace
            .backends
            .iter()
            .find(|b| b.as_str() != failed && !attempted.contains(*b) && self.is_up(b))
            .cloned();
        let effect = match &next {
            Some(n) => format!("{failed} failed, switching to {n}"),
            None => format!("{failed} failed, no backend left"),
        };
        trace.record(Layer::Execution, FACTOR_FAILOVER, effect);
        next
    }
}
