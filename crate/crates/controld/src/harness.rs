//! An in-process controller on a virtual clock with simulated backends.
//!
//! Used for scheduler experiments and end-to-end tests: jobs carry a
//! [`SimScript`] in their bundle, ticks are driven explicitly, and the
//! simulated backends stay reachable for fault injection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tacc_core::bundle::{build_bundle, BuildOptions, BundleManifest};
use tacc_core::exec::{Backend, BackendKind, SimScript, SimulatedBackend, SIM_SCRIPT_PATH};
use tacc_core::sched::Policy;
use tacc_core::schema::TaskSpec;
use tacc_core::JobId;

use crate::config::{BackendConfig, ClockKind, Config, NodeConfig};
use crate::controller::{Controller, CtlError, TickReport};
use crate::state::JobState;

pub struct SimCluster {
    pub ctl: Arc<Controller>,
    pub sims: BTreeMap<String, Arc<SimulatedBackend>>,
    config: Config,
    workspaces: PathBuf,
    submitted: u64,
}

/// `count` nodes named `n0..` with the same capacity.
pub fn uniform_nodes(count: usize, cpus: u32, gpus: u32, mem_mib: u64) -> Vec<NodeConfig> {
    (0..count).map(|i| NodeConfig { name: format!("n{i}"), cpus, gpus, mem_mib }).collect()
}

impl SimCluster {
    /// Controller state lives in `dir/data`; scratch workspaces in `dir/ws`.
    pub fn new(dir: &Path, nodes: Vec<NodeConfig>, backends: &[&str], policy: Policy) -> Result<SimCluster, CtlError> {
        let config = Config {
            data_dir: dir.join("data"),
            listen: "127.0.0.1:0".into(),
            clock: ClockKind::Virtual,
            tick_ms: 10,
            nodes,
            backends: backends
                .iter()
                .map(|n| BackendConfig { name: n.to_string(), kind: BackendKind::Simulated })
                .collect(),
            policy,
            ..Config::default()
        };
        SimCluster::with_config(dir, config)
    }

    pub fn with_config(dir: &Path, config: Config) -> Result<SimCluster, CtlError> {
        let max = config.largest_node();
        let sims: BTreeMap<String, Arc<SimulatedBackend>> = config
            .backends
            .iter()
            .map(|b| (b.name.clone(), Arc::new(SimulatedBackend::new(&b.name, max))))
            .collect();
        let ordered: Vec<Arc<dyn Backend>> =
            config.backends.iter().map(|b| sims[&b.name].clone() as Arc<dyn Backend>).collect();
        let ctl = Controller::open_with(config.clone(), ordered)?;
        Ok(SimCluster { ctl, sims, config, workspaces: dir.join("ws"), submitted: 0 })
    }

    /// Drop the controller and start a new one on the same data directory,
    /// with fresh backends.
    pub fn restart(self) -> Result<SimCluster, CtlError> {
        let SimCluster { ctl, config, workspaces, submitted, .. } = self;
        ctl.shutdown();
        drop(ctl);
        let dir = workspaces.parent().expect("workspace dir has a parent").to_path_buf();
        let mut c = SimCluster::with_config(&dir, config)?;
        c.submitted = submitted;
        Ok(c)
    }

    pub fn sim(&self, name: &str) -> &SimulatedBackend {
        &self.sims[name]
    }

    /// Build a bundle holding `script` straight into the controller's store.
    pub fn bundle(&mut self, spec: &TaskSpec, script: &SimScript) -> BundleManifest {
        self.submitted += 1;
        let ws = self.workspaces.join(self.submitted.to_string());
        std::fs::create_dir_all(&ws).expect("workspace dir");
        std::fs::write(ws.join(SIM_SCRIPT_PATH), script.to_json()).expect("write script");
        let manifest = build_bundle(spec, &ws, self.ctl.store(), BuildOptions::default()).expect("bundle builds");
        let _ = std::fs::remove_dir_all(&ws);
        manifest
    }

    pub fn submit(&mut self, spec: &TaskSpec, script: &SimScript) -> Result<JobId, CtlError> {
        let manifest = self.bundle(spec, script);
        self.ctl.submit(&spec.to_value().to_string(), manifest.bundle_id)
    }

    pub fn tick(&self) -> TickReport {
        self.ctl.tick()
    }

    pub fn state_of(&self, job: JobId) -> JobState {
        self.ctl.job(job).expect("known job").state
    }

    /// Tick until `done` holds or `max_ticks` pass. Returns whether it held.
    pub fn run_until(&self, max_ticks: u64, mut done: impl FnMut(&Controller) -> bool) -> bool {
        for _ in 0..max_ticks {
            if done(&self.ctl) {
                return true;
            }
            self.ctl.tick();
        }
        done(&self.ctl)
    }

    /// Tick until every job is terminal.
    pub fn run_to_completion(&self, max_ticks: u64) -> bool {
        self.run_until(max_ticks, |c| c.state().jobs.values().all(|j| j.state.is_terminal()))
    }
}

/// A spec for scripted jobs.
pub fn sim_spec(name: &str, user: &str, gpus: u32, nodes: u32, walltime_s: u64) -> TaskSpec {
    let mut spec = TaskSpec::minimal(name, user, "sim", 1, 1024);
    spec.resources.gpus = gpus;
    spec.nodes = nodes;
    spec.walltime_estimate_s = walltime_s;
    spec
}
