//! An in-process controller served over TCP, and a way to run the `tcloud`
//! binary against it.

#![allow(dead_code)]

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::thread::JoinHandle;

use tacc_controld::harness::{uniform_nodes, SimCluster};
use tacc_controld::server;
use tacc_core::exec::{SimScript, SIM_SCRIPT_PATH};
use tacc_core::sched::Policy;
use tacc_core::schema::TaskSpec;
use tacc_tcloud::config::{Cluster, ClusterConfig};

pub struct Served {
    pub cluster: SimCluster,
    pub addr: String,
    server: Option<JoinHandle<()>>,
    ticker: Option<JoinHandle<()>>,
}

impl Served {
    pub fn start(dir: &Path, nodes: usize, gpus: u32) -> Served {
        let cluster =
            SimCluster::new(dir, uniform_nodes(nodes, 16, gpus, 64 * 1024), &["sim0"], Policy::default()).unwrap();
        Served::serve(cluster)
    }

    pub fn serve(cluster: SimCluster) -> Served {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let ctl = cluster.ctl.clone();
        let server = std::thread::spawn(move || server::serve(ctl, listener).unwrap());
        Served { cluster, addr, server: Some(server), ticker: None }
    }

    /// Tick in the background every `tick_ms` of wall time.
    pub fn start_ticker(&mut self) {
        let ctl = self.cluster.ctl.clone();
        self.ticker = Some(std::thread::spawn(move || ctl.run()));
    }

    pub fn ctl(&self) -> &Arc<tacc_controld::Controller> {
        &self.cluster.ctl
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        self.cluster.ctl.shutdown();
        if let Some(t) = self.ticker.take() {
            let _ = t.join();
        }
        if let Some(s) = self.server.take() {
            let _ = s.join();
        }
    }
}

/// A client-side home: config file plus workspaces.
pub struct Client {
    pub root: PathBuf,
    pub config: PathBuf,
}

impl Client {
    /// Config with the given (name, endpoint) pairs, the first one current.
    pub fn new(root: &Path, clusters: &[(&str, &str)]) -> Client {
        std::fs::create_dir_all(root).unwrap();
        let config = ClusterConfig {
            clusters: clusters
                .iter()
                .map(|(n, e)| Cluster { defaults: Default::default(), endpoint: e.to_string(), name: n.to_string() })
                .collect(),
            current: clusters[0].0.to_string(),
        };
        let path = root.join("config.json");
        std::fs::write(&path, config.to_text()).unwrap();
        Client { root: root.to_path_buf(), config: path }
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tcloud"))
            .args(args)
            .env("TCLOUD_CONFIG", &self.config)
            .current_dir(&self.root)
            .output()
            .expect("tcloud runs")
    }

    /// Write `task.json` and `sim.json` into `root/<name>/`; returns the task file.
    pub fn workspace(&self, name: &str, spec: &TaskSpec, script: &SimScript) -> PathBuf {
        let ws = self.root.join(name);
        std::fs::create_dir_all(&ws).unwrap();
        std::fs::write(ws.join(SIM_SCRIPT_PATH), script.to_json()).unwrap();
        let task = ws.join("task.json");
        std::fs::write(&task, serde_json::to_string_pretty(&spec.to_value()).unwrap()).unwrap();
        task
    }
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `[objects, manifests, bytes, frames]` from the upload summary `tcloud submit` prints.
pub fn upload_stats(o: &Output) -> [u64; 4] {
    let text = stderr(o);
    let line = text.lines().find(|l| l.starts_with("uploaded ")).expect("upload summary");
    let nums: Vec<u64> = line
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    [nums[0], nums[1], nums[2], nums[3]]
}

/// `(objects, manifests, frames)`.
pub fn upload_counts(o: &Output) -> (u64, u64, u64) {
    let [objects, manifests, _, frames] = upload_stats(o);
    (objects, manifests, frames)
}
