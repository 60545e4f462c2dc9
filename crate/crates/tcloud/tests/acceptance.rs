//! Acceptance checks. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero if any fails. A numeric argument runs only that
//! criterion: `cargo test --test acceptance -- 4`.

mod common;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::os::unix::fs::PermissionsExt;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config as RunnerConfig, RngAlgorithm, TestRng, TestRunner};
use tacc_controld::eventlog::{encode_record, read_log, recover, LOG_FILE};
use tacc_controld::harness::{sim_spec, uniform_nodes, SimCluster};
use tacc_controld::state::{replay, ControllerState, Event, EventKind, JobState};
use tacc_core::bundle::{build_bundle, gc, materialize, BuildOptions, DirStore, MemStore, DEFAULT_CHUNK_SIZE};
use tacc_core::exec::{Backend, Health, SimScript};
use tacc_core::exec::{
    Layer, FACTOR_FAILOVER, FACTOR_REGISTRY_ORDER, FACTOR_RUNTIME, FACTOR_STATIC, FACTOR_USER_PREFERENCE,
};
use tacc_core::sched::sim::{simulate, SimJob, SimOutcome};
use tacc_core::sched::{fair_share_factor, AccountPolicy, AccountState, Accounts, NodeState, Policy, Start};
use tacc_core::schema::{Qos, ResourceReq, TaskSpec};
use tacc_core::{Digest, ErrorCode, JobId};
use tacc_proto::{Client as ProtoClient, Endpoint};

use common::{stderr, stdout, upload_stats, Client, Served};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("scheduler matches brute-force reference", c1_scheduler_oracle),
        ("fair-share factor values", c2_fair_share),
        ("gang time-slicing fairness", c3_gang_fairness),
        ("delta caching on resubmit", c4_delta_caching),
        ("bundle round-trip and gc safety", c5_bundle_round_trip),
        ("event-sourcing determinism", c6_event_sourcing),
        ("state-machine totality", c7_totality),
        ("fail-safe backend switching", c8_failover),
        ("end-to-end CLI flow", c9_cli_flow),
        ("concurrent submit sessions", c10_online),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn sample<S: Strategy>(runner: &mut TestRunner, strategy: &S) -> S::Value {
    strategy.new_tree(runner).expect("strategy generates").current()
}

fn seeded_runner() -> TestRunner {
    TestRunner::new_with_rng(RunnerConfig::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// ---------------------------------------------------------------- 1 ----

/// Resources as (cpus, gpus, mem) so the reference shares no arithmetic
/// with the scheduler.
type Res = [i64; 3];

fn res(r: &ResourceReq) -> Res {
    [i64::from(r.cpus), i64::from(r.gpus), r.mem_mib as i64]
}

fn fits(need: &Res, free: &Res) -> bool {
    (0..3).all(|i| need[i] <= free[i])
}

fn add(a: &mut Res, b: &Res) {
    (0..3).for_each(|i| a[i] += b[i]);
}

fn sub(a: &mut Res, b: &Res) {
    (0..3).for_each(|i| a[i] -= b[i]);
}

fn first_fit(free: &[Res], need: &Res, count: u32) -> Option<Vec<usize>> {
    let picked: Vec<usize> = (0..free.len()).filter(|&n| fits(need, &free[n])).take(count as usize).collect();
    (picked.len() == count as usize).then_some(picked)
}

#[derive(Clone, Debug)]
struct Workload {
    caps: Vec<Res>,
    jobs: Vec<SimJob>,
    policy: Policy,
}

impl Workload {
    fn nodes(&self) -> Vec<NodeState> {
        self.caps
            .iter()
            .enumerate()
            .map(|(i, c)| NodeState::new(format!("n{i}"), ResourceReq::new(c[0] as u32, c[1] as u32, c[2] as u64)))
            .collect()
    }
}

const QOS: [Qos; 3] = [Qos::High, Qos::Normal, Qos::Preemptible];

/// Up to 20 jobs on up to 4 nodes with up to 8 GPUs each. With `uniform`,
/// one user, one QoS and exact runtime estimates.
fn workload(uniform: bool) -> impl Strategy<Value = Workload> {
    let node = (8i64..=32, 1i64..=8, 16i64..=64).prop_map(|(c, g, m)| [c, g, m * 1024]);
    let job = (0usize..3, 0usize..3, 0u64..=60, 1u32..=8, 1u32..=8, 1u64..=16, 1u32..=3, 1u64..=50, 0.0f64..=1.0);
    let quota = prop::option::of(4u32..=16);
    (prop::collection::vec(node, 1..=4), prop::collection::vec(job, 1..=20), quota, prop::bool::weighted(0.85))
        .prop_map(move |(caps, jobs, quota, backfill)| {
            let jobs = jobs
                .into_iter()
                .enumerate()
                .map(|(i, (user, qos, submit, gpus, cpus, mem_gib, nodes, wall, frac))| {
                    let runtime = if uniform { wall } else { ((wall as f64 * frac).ceil() as u64).clamp(1, wall) };
                    SimJob {
                        job_id: JobId(i as u64 + 1),
                        user: format!("u{}", if uniform { 0 } else { user }),
                        qos: if uniform { Qos::Normal } else { QOS[qos] },
                        submit_s: submit,
                        per_node: ResourceReq::new(cpus, gpus, mem_gib * 1024),
                        nodes,
                        walltime_s: wall,
                        runtime_s: runtime,
                    }
                })
                .collect();
            let mut policy = Policy { backfill_enabled: uniform || backfill, ..Policy::default() };
            if let (Some(limit), false) = (quota, uniform) {
                policy.users.insert("u0".into(), AccountPolicy { max_running_gpus: limit, ..AccountPolicy::default() });
            }
            Workload { caps, jobs, policy }
        })
}

#[derive(Debug, Default, PartialEq)]
struct RefOutcome {
    starts: BTreeMap<JobId, u64>,
    preemptions: Vec<(u64, JobId)>,
    stranded: Vec<JobId>,
}

struct RefRun {
    job: usize,
    start: u64,
    end: u64,
    est_end: u64,
    nodes: Vec<usize>,
}

fn qos_rank(q: Qos) -> u8 {
    match q {
        Qos::High => 2,
        Qos::Normal => 1,
        Qos::Preemptible => 0,
    }
}

/// Event-by-event reference: one scheduling pass per integer second.
///
/// Ordering is by QoS class, then submit time, then id. That is what the
/// multifactor priority reduces to here: usage is never charged in these
/// workloads, and the age term (at most a few hundred seconds against a
/// week's saturation) is far below the gap between QoS classes.
fn reference(w: &Workload) -> RefOutcome {
    let jobs = &w.jobs;
    let policy = &w.policy;
    let limit = |user: &str| {
        i64::from(policy.users.get(user).map_or(policy.default_account.max_running_gpus, |a| a.max_running_gpus))
    };
    let total_gpus = |j: &SimJob| i64::from(j.per_node.gpus) * i64::from(j.nodes);
    let last_arrival = jobs.iter().map(|j| j.submit_s).max().unwrap_or(0);

    let mut out = RefOutcome::default();
    let mut queue: Vec<usize> = Vec::new();
    let mut running: Vec<RefRun> = Vec::new();
    let mut t = 0u64;
    loop {
        running.retain(|r| r.end > t);
        queue.extend((0..jobs.len()).filter(|&i| jobs[i].submit_s == t));

        let mut free = w.caps.clone();
        let mut gpus: BTreeMap<String, i64> = BTreeMap::new();
        for r in &running {
            let j = &jobs[r.job];
            for &n in &r.nodes {
                sub(&mut free[n], &res(&j.per_node));
            }
            *gpus.entry(j.user.clone()).or_default() += total_gpus(j);
        }
        let mut order = queue.clone();
        order.sort_by_key(|&i| (Reverse(qos_rank(jobs[i].qos)), jobs[i].submit_s, jobs[i].job_id));

        let mut victims: Vec<usize> = Vec::new();
        let mut starts: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut head: Option<(u64, Vec<Res>)> = None;
        for &i in &order {
            let j = &jobs[i];
            let need = res(&j.per_node);
            if gpus.get(&j.user).copied().unwrap_or(0) + total_gpus(j) > limit(&j.user) {
                continue;
            }
            let place = first_fit(&free, &need, j.nodes);
            let mut begin = |free: &mut Vec<Res>, gpus: &mut BTreeMap<String, i64>, nodes: Vec<usize>| {
                for &n in &nodes {
                    sub(&mut free[n], &need);
                }
                *gpus.entry(j.user.clone()).or_default() += total_gpus(j);
                starts.push((i, nodes));
            };
            match &mut head {
                None => {
                    if let Some(nodes) = place {
                        begin(&mut free, &mut gpus, nodes);
                        continue;
                    }
                    if policy.preemption_enabled && j.qos == Qos::High {
                        if let Some(set) = min_victims(jobs, &running, &victims, &free, &need, j.nodes) {
                            for &r in &set {
                                let v = &jobs[running[r].job];
                                for &n in &running[r].nodes {
                                    add(&mut free[n], &res(&v.per_node));
                                }
                                *gpus.get_mut(&v.user).expect("running user") -= total_gpus(v);
                            }
                            victims.extend(set);
                            let nodes = first_fit(&free, &need, j.nodes).expect("victims free enough");
                            begin(&mut free, &mut gpus, nodes);
                            continue;
                        }
                    }
                    let mut releases: Vec<(u64, usize, Res)> = Vec::new();
                    for (_, r) in running.iter().enumerate().filter(|(k, _)| !victims.contains(k)) {
                        for &n in &r.nodes {
                            releases.push((r.est_end.max(t + 1), n, res(&jobs[r.job].per_node)));
                        }
                    }
                    for (s, nodes) in &starts {
                        for &n in nodes {
                            releases.push((t + jobs[*s].walltime_s, n, res(&jobs[*s].per_node)));
                        }
                    }
                    let horizon = releases.iter().map(|r| r.0).max().unwrap_or(t);
                    for s in t + 1..=horizon {
                        let mut avail = free.clone();
                        for (at, n, r) in &releases {
                            if *at <= s {
                                add(&mut avail[*n], r);
                            }
                        }
                        if let Some(nodes) = first_fit(&avail, &need, j.nodes) {
                            for &n in &nodes {
                                sub(&mut avail[n], &need);
                            }
                            head = Some((s, avail));
                            break;
                        }
                    }
                    if head.is_some() && !policy.backfill_enabled {
                        break;
                    }
                }
                Some((reserved, shadow)) => {
                    if let Some(nodes) = place {
                        if t + j.walltime_s <= *reserved {
                            begin(&mut free, &mut gpus, nodes);
                        } else if nodes.iter().all(|&n| fits(&need, &shadow[n])) {
                            for &n in &nodes {
                                sub(&mut shadow[n], &need);
                            }
                            begin(&mut free, &mut gpus, nodes);
                        }
                    }
                }
            }
        }

        victims.sort_unstable_by(|a, b| b.cmp(a));
        let mut requeue = Vec::new();
        let mut preempted: Vec<JobId> = Vec::new();
        for r in victims {
            let run = running.remove(r);
            out.starts.remove(&jobs[run.job].job_id);
            preempted.push(jobs[run.job].job_id);
            requeue.push(run.job);
        }
        preempted.sort();
        out.preemptions.extend(preempted.into_iter().map(|id| (t, id)));
        for (i, nodes) in starts {
            let j = &jobs[i];
            queue.retain(|&q| q != i);
            out.starts.insert(j.job_id, t);
            running.push(RefRun { job: i, start: t, end: t + j.runtime_s.max(1), est_end: t + j.walltime_s, nodes });
        }
        queue.extend(requeue);

        if t >= last_arrival && running.is_empty() {
            break;
        }
        t += 1;
    }
    out.stranded = queue.iter().map(|&i| jobs[i].job_id).collect();
    out.stranded.sort();
    out
}

/// Smallest set of running preemptible jobs (indices into `running`) whose
/// removal lets the entry fit. Candidates are ranked lowest priority first
/// (latest submit, then latest start, then highest id); among sets of the
/// same size the lexicographically first in that ranking wins.
fn min_victims(
    jobs: &[SimJob],
    running: &[RefRun],
    taken: &[usize],
    free: &[Res],
    need: &Res,
    count: u32,
) -> Option<Vec<usize>> {
    let mut cand: Vec<usize> = (0..running.len())
        .filter(|r| !taken.contains(r) && jobs[running[*r].job].qos == Qos::Preemptible)
        .collect();
    cand.sort_by_key(|&r| {
        let j = &jobs[running[r].job];
        (Reverse(j.submit_s), Reverse(running[r].start), Reverse(j.job_id))
    });
    let works = |set: &[usize]| {
        let mut avail = free.to_vec();
        for &r in set {
            for &n in &running[r].nodes {
                add(&mut avail[n], &res(&jobs[running[r].job].per_node));
            }
        }
        first_fit(&avail, need, count).is_some()
    };
    if cand.is_empty() || !works(&cand) {
        return None;
    }
    fn combos(n: usize, k: usize, from: usize, acc: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize]) -> bool) -> bool {
        if acc.len() == k {
            return visit(acc);
        }
        for i in from..n {
            acc.push(i);
            if combos(n, k, i + 1, acc, visit) {
                return true;
            }
            acc.pop();
        }
        false
    }
    for k in 1..=cand.len() {
        let mut found = None;
        combos(cand.len(), k, 0, &mut Vec::new(), &mut |idx| {
            let set: Vec<usize> = idx.iter().map(|&i| cand[i]).collect();
            if works(&set) {
                found = Some(set);
                true
            } else {
                false
            }
        });
        if found.is_some() {
            return found;
        }
    }
    None
}

/// Component-wise usage at every integer instant, from the intervals alone.
fn oversubscribed_at(w: &Workload, out: &SimOutcome) -> Option<(u64, String)> {
    let end = out.intervals.iter().map(|i| i.end_s).max().unwrap_or(0);
    for t in 0..end {
        let mut used = vec![[0i64; 3]; w.caps.len()];
        for i in out.intervals.iter().filter(|i| i.start_s <= t && t < i.end_s) {
            for n in &i.nodes {
                let idx: usize = n[1..].parse().expect("node names are n<k>");
                add(&mut used[idx], &res(&i.per_node));
            }
        }
        for (n, u) in used.iter().enumerate() {
            if !fits(u, &w.caps[n]) {
                return Some((t, format!("n{n}")));
            }
        }
    }
    None
}

fn c1_scheduler_oracle() -> Outcome {
    let started = Instant::now();
    let mut runner = seeded_runner();
    let mixed = workload(false);
    let mut stats = (0usize, 0usize, 0usize);
    for k in 0..2000 {
        let w = sample(&mut runner, &mixed);
        let out = simulate(&w.nodes(), &w.jobs, &w.policy);
        let mut stranded = out.stranded.clone();
        stranded.sort();
        // Victims of one cycle are compared as a set.
        let mut preemptions = out.preemptions.clone();
        preemptions.sort();
        let got = RefOutcome { starts: out.starts.clone(), preemptions, stranded };
        let want = reference(&w);
        ensure!(got == want, "workload {k} diverges from the reference\n{w:?}\nscheduler: {got:?}\nreference: {want:?}");
        if let Some((t, n)) = oversubscribed_at(&w, &out) {
            return Err(format!("workload {k} oversubscribes {n} at t={t}"));
        }
        stats.0 += out.intervals.iter().filter(|i| i.backfill).count();
        stats.1 += out.preemptions.len();
    }

    let uniform = workload(true);
    for k in 0..200 {
        let w = sample(&mut runner, &uniform);
        let with = simulate(&w.nodes(), &w.jobs, &w.policy);
        let strict_policy = Policy { backfill_enabled: false, ..w.policy.clone() };
        let without = simulate(&w.nodes(), &w.jobs, &strict_policy);
        let strict = Workload { policy: strict_policy, ..w.clone() };
        ensure!(
            without.starts == reference(&strict).starts,
            "uniform workload {k}: no-backfill run diverges from the reference"
        );
        if let Some((_, head, _)) = with.first_reservation {
            stats.2 += 1;
            ensure!(
                with.starts[&head] <= without.starts[&head],
                "uniform workload {k}: head {head} starts at {} with backfill, {} without",
                with.starts[&head],
                without.starts[&head]
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s, budget 60 s");
    Ok(format!(
        "2000 mixed workloads identical to the reference ({} backfills, {} preemptions); \
         200 uniform workloads, {} with a reservation, head never delayed by backfill",
        stats.0, stats.1, stats.2
    ))
}

// ---------------------------------------------------------------- 2 ----

fn c2_fair_share() -> Outcome {
    let accounts = |usage: &[(&str, f64)]| -> Accounts {
        usage
            .iter()
            .map(|(u, x)| {
                let mut a = AccountState::new(*u, 1.0);
                a.decayed_usage = *x;
                (u.to_string(), a)
            })
            .collect()
    };
    // Direct evaluation of 2^(-(u/U)/(s/S)).
    let oracle = |u: f64, total_u: f64, s: f64, total_s: f64| 2f64.powf(-(u / total_u) / (s / total_s));

    let idle = accounts(&[("a", 0.0), ("b", 0.0)]);
    let f0 = fair_share_factor(&idle["a"], &idle);
    ensure!(f0 == 1.0, "factor with no usage is {f0}");
    let fresh = accounts(&[("a", 0.0), ("b", 40.0)]);
    ensure!(fair_share_factor(&fresh["a"], &fresh) == 1.0, "zero-usage user among busy ones is not 1");

    let even = accounts(&[("a", 5.0), ("b", 5.0)]);
    let half = fair_share_factor(&even["a"], &even);
    ensure!(half == 0.5, "usage equal to share gives {half}");

    let split = accounts(&[("a", 750.0), ("b", 250.0)]);
    let fa = fair_share_factor(&split["a"], &split);
    let fb = fair_share_factor(&split["b"], &split);
    for (got, want, lit) in [(fa, oracle(750.0, 1000.0, 1.0, 2.0), 0.353553), (fb, oracle(250.0, 1000.0, 1.0, 2.0), 0.707107)] {
        ensure!((got - want).abs() < 1e-12, "{got} differs from direct evaluation {want}");
        ensure!((got - lit).abs() < 1e-6, "{got} differs from {lit}");
    }
    Ok(format!("f(0)=1, f(u=s)=0.5, 750/250 -> {fa:.6} / {fb:.6}"))
}

// ---------------------------------------------------------------- 3 ----

/// `gangs` preemptible jobs sharing one node; returns each one's runtime
/// over `horizon` seconds from the first start.
fn gang_runtimes(gangs: usize, horizon: u64) -> Result<Vec<u64>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = SimCluster::new(dir.path(), uniform_nodes(1, 16, 8, 65536), &["sim0"], Policy::default())
        .map_err(|e| e.to_string())?;
    let mut ids = Vec::new();
    for g in 0..gangs {
        let mut spec = sim_spec(&format!("gang{g}"), &format!("user{g}"), 8, 1, 1_000_000);
        spec.qos = Qos::Preemptible;
        ids.push(c.submit(&spec, &SimScript::default()).map_err(|e| e.to_string())?);
    }
    c.tick();
    let t0 = c.ctl.now();
    while c.ctl.now() < t0 + horizon {
        c.tick();
    }
    let now = c.ctl.now();
    Ok(ids.iter().map(|id| c.ctl.job(*id).expect("known").active_at(now)).collect())
}

fn c3_gang_fairness() -> Outcome {
    let mut details = Vec::new();
    for (gangs, horizon) in [(2usize, 300u64), (3, 900)] {
        let share = horizon / gangs as u64;
        let got = gang_runtimes(gangs, horizon)?;
        for (g, r) in got.iter().enumerate() {
            ensure!(r.abs_diff(share) <= 30, "{gangs} gangs over {horizon} s: gang {g} ran {r} s, want {share}±30");
        }
        details.push(format!("{gangs} gangs/{horizon} s -> {got:?}"));
    }
    Ok(details.join("; "))
}

// ---------------------------------------------------------------- 4 ----

struct XorShift(u64);

impl XorShift {
    fn fill(&mut self, buf: &mut [u8]) {
        for chunk in buf.chunks_mut(8) {
            self.0 ^= self.0 << 13;
            self.0 ^= self.0 >> 7;
            self.0 ^= self.0 << 17;
            chunk.copy_from_slice(&self.0.to_le_bytes()[..chunk.len()]);
        }
    }
}

/// Object ids of a workspace under fixed-size chunking.
fn chunk_ids(root: &Path) -> BTreeSet<Digest> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(root).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        for piece in bytes.chunks(DEFAULT_CHUNK_SIZE as usize) {
            ids.insert(Digest::of(piece));
        }
    }
    ids
}

fn c4_delta_caching() -> Outcome {
    const FILES: usize = 100;
    const TOTAL: usize = 50 * 1024 * 1024;
    const BIG: usize = 6 * 1024 * 1024;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let served = Served::start(&dir.path().join("server"), 1, 8);
    let client = Client::new(&dir.path().join("client"), &[("test", &served.addr)]);
    let ws = client.root.join("ws");
    std::fs::create_dir_all(&ws).unwrap();
    let mut rng = XorShift(0x9e37_79b9_7f4a_7c15);
    let small_total = TOTAL - 5 * BIG;
    let mut written = 0;
    for i in 0..FILES {
        let size = if i < 5 { BIG } else { small_total / (FILES - 5) + usize::from(i - 5 < small_total % (FILES - 5)) };
        let mut buf = vec![0u8; size];
        rng.fill(&mut buf);
        std::fs::write(ws.join(format!("f{i:03}.bin")), &buf).unwrap();
        written += size;
    }
    ensure!(written == TOTAL, "workspace holds {written} bytes");
    let task = client.root.join("task.json");
    let spec = sim_spec("delta", "alice", 1, 1, 10);
    std::fs::write(&task, spec.to_value().to_string()).unwrap();
    let submit = || client.run(&["submit", task.to_str().unwrap(), "--workspace", ws.to_str().unwrap()]);
    let manifest_len = || {
        let m = build_bundle(&spec, &ws, &MemStore::new(), BuildOptions::default()).unwrap();
        m.canonical_text().len() as u64
    };

    let mut known = chunk_ids(&ws);
    let first = submit();
    ensure!(first.status.success(), "first submit failed: {}", stderr(&first));
    let [objects, manifests, bytes, frames] = upload_stats(&first);
    ensure!(
        objects == known.len() as u64 && manifests == 1 && frames == objects + 1,
        "first submit uploaded {objects} objects, {manifests} manifests in {frames} frames; {} distinct chunks",
        known.len()
    );
    ensure!(bytes == TOTAL as u64 + manifest_len(), "first submit sent {bytes} bytes");

    let again = submit();
    ensure!(again.status.success(), "resubmit failed: {}", stderr(&again));
    ensure!(upload_stats(&again) == [0, 0, 0, 0], "unchanged resubmit uploaded {:?}", upload_stats(&again));

    let mut details = vec![format!("first {objects} objects/{frames} frames")];
    for (file, offset) in [("f002.bin", 5 * 1024 * 1024 + 17), ("f042.bin", 1000)] {
        let path = ws.join(file);
        let mut content = std::fs::read(&path).unwrap();
        content[offset] ^= 0x01;
        std::fs::write(&path, &content).unwrap();
        let now_ids = chunk_ids(&ws);
        let fresh: Vec<&Digest> = now_ids.iter().filter(|d| !known.contains(d)).collect();
        let fresh_bytes: u64 = content
            .chunks(DEFAULT_CHUNK_SIZE as usize)
            .filter(|p| fresh.contains(&&Digest::of(p)))
            .map(|p| p.len() as u64)
            .sum();
        let chunk_set = (content.len() as u64).div_ceil(DEFAULT_CHUNK_SIZE) * DEFAULT_CHUNK_SIZE;
        let mlen = manifest_len();

        let o = submit();
        ensure!(o.status.success(), "resubmit after editing {file} failed: {}", stderr(&o));
        let [objects, manifests, bytes, frames] = upload_stats(&o);
        ensure!(
            objects == fresh.len() as u64 && manifests == 1 && frames == fresh.len() as u64 + 1,
            "editing {file}: {objects} objects + {manifests} manifests in {frames} frames, expected {} + 1",
            fresh.len()
        );
        ensure!(bytes == fresh_bytes + mlen, "editing {file}: sent {bytes} bytes, expected {}", fresh_bytes + mlen);
        ensure!(bytes <= chunk_set.min(content.len() as u64) + mlen, "editing {file}: {bytes} bytes exceeds bound");
        details.push(format!("1-byte edit of {file}: {frames} frames, {bytes} bytes"));
        known.extend(now_ids);
    }
    Ok(details.join("; "))
}

// ---------------------------------------------------------------- 5 ----

#[derive(Clone, Debug)]
struct Tree {
    files: BTreeMap<String, (Vec<u8>, bool)>,
    empty_dirs: Vec<String>,
}

fn tree() -> impl Strategy<Value = Tree> {
    let path = prop::collection::vec("[a-d]{1,3}", 1..=3).prop_map(|p| p.join("/"));
    let file = (path, prop::collection::vec(any::<u8>(), 0..300), any::<bool>());
    (prop::collection::vec(file, 0..10), prop::collection::vec("[w-z]{1,2}", 0..3)).prop_map(|(files, dirs)| {
        let mut out: BTreeMap<String, (Vec<u8>, bool)> = BTreeMap::new();
        for (p, bytes, exec) in files {
            let clash = out.keys().any(|k| k.starts_with(&format!("{p}/")) || p.starts_with(&format!("{k}/")));
            if !clash {
                out.insert(p, (bytes, exec));
            }
        }
        Tree { files: out, empty_dirs: dirs.into_iter().map(|d| format!("empty_{d}")).collect() }
    })
}

fn write_tree(t: &Tree, root: &Path) {
    std::fs::create_dir_all(root).unwrap();
    for (p, (bytes, exec)) in &t.files {
        let path = root.join(p);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(if *exec { 0o755 } else { 0o644 })).unwrap();
    }
    for d in &t.empty_dirs {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
}

/// Relative path -> (contents, exec bits) for files, `None` for directories.
fn listing(root: &Path) -> BTreeMap<String, Option<(Vec<u8>, u32)>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Option<(Vec<u8>, u32)>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let meta = std::fs::symlink_metadata(&path).unwrap();
            if meta.is_dir() {
                out.insert(rel, None);
                walk(root, &path, out);
            } else {
                out.insert(rel, Some((std::fs::read(&path).unwrap(), meta.permissions().mode() & 0o111)));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn c5_bundle_round_trip() -> Outcome {
    let mut runner = seeded_runner();
    let strategy = (tree(), tree(), 8u64..=256);
    let spec = TaskSpec::minimal("t", "u", "true", 1, 16);
    let mut removed_total = 0;
    for case in 0..1000 {
        let (a, b, chunk) = sample(&mut runner, &strategy);
        let scratch = tempfile::tempdir().unwrap();
        let (wa, wb) = (scratch.path().join("a"), scratch.path().join("b"));
        write_tree(&a, &wa);
        write_tree(&b, &wb);
        let store = DirStore::open(scratch.path().join("cas")).unwrap();
        let opts = BuildOptions { chunk_size: chunk };
        let ma = build_bundle(&spec, &wa, &store, opts).map_err(|e| format!("case {case}: {e}"))?;
        let mb = build_bundle(&spec, &wb, &store, opts).map_err(|e| format!("case {case}: {e}"))?;

        let out = scratch.path().join("out_a");
        materialize(&ma, &store, &out).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(listing(&wa) == listing(&out), "case {case}: materialized tree differs from the workspace");

        removed_total += gc(&store, std::slice::from_ref(&mb)).map_err(|e| e.to_string())?;
        let out = scratch.path().join("out_b");
        materialize(&mb, &store, &out).map_err(|e| format!("case {case}: live bundle broken by gc: {e}"))?;
        ensure!(listing(&wb) == listing(&out), "case {case}: live bundle differs after gc");
    }
    Ok(format!("1000 workspaces byte- and mode-identical; gc freed {removed_total} unreachable bytes"))
}

// ---------------------------------------------------------------- 6 ----

#[derive(Clone, Debug)]
enum Op {
    Submit { user: u8, qos: usize, gpus: u32, nodes: u32, wall: u64, exit_at: u64, code: i32 },
    Kill(usize),
    SetDown(usize, bool),
    FailProvisions(usize, u32),
    Tick(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u8..3, 0usize..3, 1u32..=8, 1u32..=2, 2u64..=30, 1u64..=40, prop_oneof![4 => Just(0), 1 => 1i32..=3])
            .prop_map(|(user, qos, gpus, nodes, wall, exit_at, code)| Op::Submit { user, qos, gpus, nodes, wall, exit_at, code }),
        1 => (0usize..64).prop_map(Op::Kill),
        1 => (0usize..2, any::<bool>()).prop_map(|(b, d)| Op::SetDown(b, d)),
        1 => (0usize..2, 1u32..=2).prop_map(|(b, n)| Op::FailProvisions(b, n)),
        4 => (1u8..=5).prop_map(Op::Tick),
    ]
}

fn c6_event_sourcing() -> Outcome {
    let mut runner = seeded_runner();
    let ops = prop::collection::vec(op(), 10..60);
    let (mut events_total, mut cuts) = (0usize, 0usize);
    for run in 0..100 {
        let plan = sample(&mut runner, &ops);
        let dir = tempfile::tempdir().unwrap();
        let mut c = SimCluster::new(dir.path(), uniform_nodes(3, 16, 8, 65536), &["sim0", "sim1"], Policy::default())
            .map_err(|e| e.to_string())?;
        let mut ids: Vec<JobId> = Vec::new();
        for step in &plan {
            match step {
                Op::Submit { user, qos, gpus, nodes, wall, exit_at, code } => {
                    let mut spec = sim_spec(&format!("j{}", ids.len()), &format!("u{user}"), *gpus, *nodes, *wall);
                    spec.qos = QOS[*qos];
                    let script = SimScript::parse(&format!(
                        r#"[{{"at": 1, "action": "log", "text": "hello"}}, {{"at": {exit_at}, "action": "exit", "code": {code}}}]"#
                    ))
                    .unwrap();
                    if let Ok(id) = c.submit(&spec, &script) {
                        ids.push(id);
                    }
                }
                Op::Kill(k) if !ids.is_empty() => {
                    let _ = c.ctl.kill(ids[k % ids.len()]);
                }
                Op::Kill(_) => {}
                Op::SetDown(b, down) => c.sim(&format!("sim{b}")).set_down(*down),
                Op::FailProvisions(b, n) => c.sim(&format!("sim{b}")).inject_provision_failures(*n),
                Op::Tick(n) => {
                    for _ in 0..*n {
                        c.tick();
                    }
                }
            }
        }
        c.sim("sim0").set_down(false);
        c.sim("sim1").set_down(false);
        c.run_until(300, |ctl| ctl.state().jobs.values().all(|j| j.state.is_terminal()));

        let live = c.ctl.state();
        let data = c.ctl.data_dir().to_path_buf();
        let half_life = c.ctl.policy().half_life_s;
        let recovered = recover(&data, half_life).map_err(|e| e.to_string())?;
        ensure!(recovered.corrupt.is_none(), "run {run}: log reported corrupt");
        ensure!(recovered.state == live, "run {run}: recovered state differs from live state");
        let (events, corrupt) = read_log(&data).map_err(|e| e.to_string())?;
        ensure!(corrupt.is_none(), "run {run}: log reported corrupt");
        let once = replay(half_life, &events).map_err(|e| e.to_string())?;
        let twice = replay(half_life, &events).map_err(|e| e.to_string())?;
        ensure!(once == live && twice == live, "run {run}: replay is not deterministic");
        let mut reapplied = once.clone();
        if let Some(e) = events.last() {
            ensure!(reapplied.apply(e).is_err() && reapplied == once, "run {run}: re-applying an event changed state");
        }
        events_total += events.len();

        // Truncation at random offsets, plus one flipped byte.
        let bytes = std::fs::read(data.join(LOG_FILE)).unwrap();
        let mut bounds = vec![0u64];
        for e in &events {
            bounds.push(bounds.last().unwrap() + encode_record(e).len() as u64);
        }
        ensure!(*bounds.last().unwrap() == bytes.len() as u64, "run {run}: log length mismatch");
        let cut_points = sample(&mut runner, &prop::collection::vec(0..=bytes.len(), 3));
        for (i, cut) in cut_points.into_iter().enumerate() {
            let copy = tempfile::tempdir().unwrap();
            let mut damaged = bytes[..cut].to_vec();
            // The first damaged byte: a flipped one mid-log, else the cut itself.
            let first_bad = if i == 0 && cut > 0 { cut / 2 } else { cut };
            if first_bad < cut {
                damaged[first_bad] ^= 0xff;
            }
            std::fs::write(copy.path().join(LOG_FILE), &damaged).unwrap();
            let k = bounds.iter().rposition(|b| *b as usize <= first_bad).unwrap();
            let expected = replay(half_life, &events[..k]).map_err(|e| e.to_string())?;
            let got = recover(copy.path(), half_life).map_err(|e| format!("run {run}: recovery failed: {e}"))?;
            ensure!(got.state == expected, "run {run}: damaged log at byte {first_bad} did not yield the {k}-event prefix");
            ensure!(got.valid_len == bounds[k], "run {run}: valid prefix length {} != {}", got.valid_len, bounds[k]);
            cuts += 1;
        }
    }
    Ok(format!("100 runs, {events_total} events: recover == live, replay deterministic, {cuts} damaged logs recover their longest valid prefix"))
}

// ---------------------------------------------------------------- 7 ----

fn push(state: &mut ControllerState, job: Option<u64>, kind: EventKind) -> Result<(), tacc_controld::state::ApplyError> {
    let e = Event { seq: state.last_seq + 1, time_s: state.last_time_s + 1, job_id: job.map(JobId), kind };
    state.apply(&e)
}

fn one_node_spec() -> TaskSpec {
    let mut s = TaskSpec::minimal("t", "alice", "run", 1, 64);
    s.resources.gpus = 1;
    s
}

fn start_decision() -> EventKind {
    EventKind::DecisionApplied {
        starts: vec![Start { job_id: JobId(1), nodes: vec!["n0".into()], per_node: one_node_spec().resources, backfill: false }],
        gang_joins: vec![],
        preemptions: vec![],
        gang_ops: vec![],
        reservation: None,
    }
}

fn provisioned() -> EventKind {
    EventKind::Provisioned { backend: "sim0".into(), runners: vec!["r0".into()], selection: Default::default() }
}

/// A state holding job 1 in `target`, built from valid events only.
fn state_with(target: JobState) -> ControllerState {
    use EventKind as K;
    use JobState as S;
    let d = Digest::of(b"bundle");
    let path: Vec<EventKind> = {
        let to_running = vec![K::Compiled, K::Enqueued, start_decision(), provisioned()];
        let mut p = vec![K::Submitted { spec: one_node_spec(), spec_hash: d, bundle_id: d }];
        match target {
            S::Submitted => {}
            S::Compiling => p.push(K::Compiled),
            S::Queued => p.extend(to_running[..2].iter().cloned()),
            S::Provisioning => p.extend(to_running[..3].iter().cloned()),
            S::Running => p.extend(to_running.iter().cloned()),
            S::Suspended => p.extend(to_running.iter().cloned().chain([K::Suspended])),
            S::Preempted => p.extend(to_running.iter().cloned().chain([K::Preempted])),
            S::Succeeded => p.extend(to_running.iter().cloned().chain([K::RankExited { rank: 0, code: 0 }])),
            S::Failed => p.extend([K::Compiled, K::Failed { reason: "x".into(), selection: None }]),
            S::Killed => p.extend(to_running[..2].iter().cloned().chain([K::Killed])),
        }
        p
    };
    let mut state = ControllerState::new(86_400.0);
    for kind in path {
        let job = match kind {
            K::DecisionApplied { .. } => None,
            _ => Some(1),
        };
        push(&mut state, job, kind).expect("building path is valid");
    }
    assert_eq!(state.jobs[&JobId(1)].state, target);
    state
}

/// One instance of every event kind, aimed at job 1 where it takes a job.
fn every_kind() -> Vec<(Option<u64>, EventKind)> {
    let d = Digest::of(b"bundle");
    vec![
        (Some(2), EventKind::Submitted { spec: one_node_spec(), spec_hash: d, bundle_id: d }),
        (Some(1), EventKind::Compiled),
        (Some(1), EventKind::Enqueued),
        (Some(1), EventKind::Failed { reason: "x".into(), selection: None }),
        (None, start_decision()),
        (Some(1), provisioned()),
        (Some(1), EventKind::RankStarted { rank: 0 }),
        (Some(1), EventKind::RankExited { rank: 0, code: 0 }),
        (Some(1), EventKind::RankFailed { rank: 0, cause: "lost".into() }),
        (Some(1), EventKind::Preempted),
        (Some(1), EventKind::Killed),
        (Some(1), EventKind::Suspended),
        (Some(1), EventKind::Resumed),
        (None, EventKind::BackendHealth { backend: "sim0".into(), health: Health::Down }),
        (None, EventKind::UsageDecayed),
        (Some(1), EventKind::Released),
    ]
}

/// The transition table: job 1's state after the event, or `None` where
/// the event must be refused.
fn expected(from: JobState, kind: &EventKind) -> Option<JobState> {
    use EventKind as K;
    use JobState as S;
    match (kind, from) {
        (K::Submitted { .. } | K::BackendHealth { .. } | K::UsageDecayed, s) => Some(s),
        (K::Compiled, S::Submitted) => Some(S::Compiling),
        (K::Enqueued, S::Compiling | S::Preempted | S::Provisioning) => Some(S::Queued),
        (K::Failed { .. }, S::Compiling | S::Provisioning | S::Running) => Some(S::Failed),
        (K::DecisionApplied { .. }, S::Queued) => Some(S::Provisioning),
        (K::Provisioned { .. }, S::Provisioning) => Some(S::Running),
        (K::RankStarted { .. }, S::Running) => Some(S::Running),
        (K::RankExited { .. }, S::Running) => Some(S::Succeeded),
        (K::RankFailed { .. }, S::Running) => Some(S::Failed),
        (K::Preempted, S::Running) => Some(S::Preempted),
        (K::Killed, S::Queued | S::Running | S::Suspended) => Some(S::Killed),
        (K::Suspended, S::Running) => Some(S::Suspended),
        (K::Resumed, S::Suspended) => Some(S::Running),
        (K::Released, S::Succeeded | S::Failed | S::Killed) => Some(from),
        _ => None,
    }
}

fn c7_totality() -> Outcome {
    let (mut defined, mut refused) = (0, 0);
    let mut unhandled = Vec::new();
    for from in JobState::ALL {
        for (job, kind) in every_kind() {
            let before = state_with(from);
            let mut after = before.clone();
            let name = kind.name();
            let want = expected(from, &kind);
            let result = std::panic::catch_unwind(AssertUnwindSafe(|| push(&mut after, job, kind)));
            match (result, want) {
                (Ok(Ok(())), Some(to)) if after.jobs[&JobId(1)].state == to => defined += 1,
                (Ok(Err(e)), None) if e.code() == ErrorCode::StateConflict && after == before => refused += 1,
                (Ok(r), w) => unhandled.push(format!("{from} x {name}: got {r:?} -> {}, table says {w:?}", after.jobs[&JobId(1)].state)),
                (Err(_), _) => unhandled.push(format!("{from} x {name}: panicked")),
            }
        }
    }
    ensure!(unhandled.is_empty(), "{} unhandled cases: {}", unhandled.len(), unhandled.join("; "));
    Ok(format!(
        "{} pairs: {defined} defined transitions, {refused} STATE_CONFLICT, 0 unhandled",
        JobState::ALL.len() * every_kind().len()
    ))
}

// ---------------------------------------------------------------- 8 ----

fn c8_failover() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let nodes = uniform_nodes(1, 16, 8, 65536);
    let mut c = SimCluster::new(&dir.path().join("a"), nodes.clone(), &["sim0", "sim1"], Policy::default())
        .map_err(|e| e.to_string())?;
    c.sim("sim0").inject_provision_failures(1);
    let id = c.submit(&sim_spec("f", "alice", 1, 1, 10), &SimScript::default()).map_err(|e| e.to_string())?;
    let report = c.tick();
    let job = c.ctl.job(id).unwrap();
    ensure!(job.state == JobState::Running, "job is {} after one period", job.state);
    ensure!(job.backend.as_deref() == Some("sim1"), "landed on {:?}", job.backend);
    ensure!(report.failovers == vec![(id, "sim1".to_string())], "failovers reported: {:?}", report.failovers);
    ensure!(
        job.entered_at(JobState::Provisioning) == job.entered_at(JobState::Running),
        "provisioning and running fall in different periods"
    );
    let trace = job.selection.clone().ok_or("no selection trace")?;
    ensure!(trace.backends == ["sim0", "sim1"], "ranked backends {:?}", trace.backends);
    let chain: Vec<(Layer, &str)> = trace.factors.iter().map(|f| (f.layer, f.factor.as_str())).collect();
    let want = vec![
        (Layer::Schema, FACTOR_USER_PREFERENCE),
        (Layer::Compiler, FACTOR_STATIC),
        (Layer::Scheduling, FACTOR_RUNTIME),
        (Layer::Execution, FACTOR_REGISTRY_ORDER),
        (Layer::Execution, FACTOR_FAILOVER),
    ];
    ensure!(chain == want, "factor chain {chain:?}");

    let mut c = SimCluster::new(&dir.path().join("b"), nodes, &["sim0", "sim1"], Policy::default())
        .map_err(|e| e.to_string())?;
    c.sim("sim0").inject_provision_failures(1);
    c.sim("sim1").inject_provision_failures(1);
    let id = c.submit(&sim_spec("f", "alice", 1, 1, 10), &SimScript::default()).map_err(|e| e.to_string())?;
    c.tick();
    let job = c.ctl.job(id).unwrap();
    let reason = job.reason.clone().unwrap_or_default();
    ensure!(job.state == JobState::Failed && reason.starts_with("BACKEND_UNAVAILABLE"), "exhausted: {} {reason}", job.state);
    let attempts = job.selection.map(|t| t.factors.iter().filter(|f| f.factor == FACTOR_FAILOVER).count());
    ensure!(attempts == Some(2), "failover records on exhaustion: {attempts:?}");
    Ok("sim0 fails -> sim1 in the same period, chain user-preference > static > runtime > registry order > \
        fail-safe switching; both failing -> Failed(BACKEND_UNAVAILABLE)"
        .into())
}

// ---------------------------------------------------------------- 9 ----

fn c9_cli_flow() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let served = Served::start(&dir.path().join("server"), 3, 8);
    let client = Client::new(&dir.path().join("client"), &[("test", &served.addr)]);
    let script = SimScript::parse(
        r#"[
        {"rank": 1, "at": 0.5, "action": "log", "text": "b0"},
        {"rank": 0, "at": 1.0, "action": "log", "text": "a0"},
        {"rank": 0, "at": 1.5, "action": "write", "path": "out/model.txt", "content": "w0"},
        {"rank": 1, "at": 1.5, "action": "write", "path": "out/model.txt", "content": "w1"},
        {"rank": 1, "at": 2.0, "action": "log", "text": "b1"},
        {"rank": 0, "at": 2.5, "action": "log", "text": "a1"},
        {"at": 3.0, "action": "exit", "code": 0}
    ]"#,
    )
    .unwrap();
    let task = client.workspace("w", &sim_spec("train", "alice", 1, 2, 10), &script);
    let o = client.run(&["submit", task.to_str().unwrap()]);
    ensure!(o.status.success(), "submit: {}", stderr(&o));
    let id = stdout(&o).trim().to_string();

    let state = |id: &str| -> Result<String, String> {
        let o = client.run(&["status", id]);
        ensure!(o.status.success(), "status: {}", stderr(&o));
        Ok(stdout(&o).lines().nth(1).and_then(|l| l.split_whitespace().nth(2)).unwrap_or("").to_string())
    };
    let mut seen = vec![state(&id)?];
    for _ in 0..20 {
        served.cluster.tick();
        let s = state(&id)?;
        if seen.last() != Some(&s) {
            seen.push(s.clone());
        }
        if s.starts_with("Succeeded") {
            break;
        }
    }
    ensure!(seen == ["Queued", "Running", "Succeeded(0,0)"], "status went through {seen:?}");

    let o = client.run(&["logs", &id]);
    ensure!(stdout(&o) == "[1] b0\n[0] a0\n[1] b1\n[0] a1\n", "logs: {:?}", stdout(&o));

    let dest = dir.path().join("results");
    let o = client.run(&["get", &id, "out/*", "--dest", dest.to_str().unwrap()]);
    ensure!(o.status.success(), "get: {}", stderr(&o));
    for (rank, want) in [(0, "w0"), (1, "w1")] {
        let got = std::fs::read_to_string(dest.join(format!("rank{rank}/out/model.txt"))).unwrap_or_default();
        ensure!(got == want, "rank{rank}/out/model.txt holds {got:?}");
    }

    let task = client.workspace("long", &sim_spec("long", "alice", 2, 3, 10_000), &SimScript::default());
    let o = client.run(&["submit", task.to_str().unwrap()]);
    let long = stdout(&o).trim().to_string();
    served.cluster.tick();
    ensure!(state(&long)? == "Running", "long job is {}", state(&long)?);
    let runners = served.cluster.sim("sim0").live_runners();
    let o = client.run(&["kill", &long]);
    ensure!(o.status.success() && stdout(&o).trim().ends_with("Killed"), "kill: {} {}", stdout(&o), stderr(&o));
    ensure!(served.cluster.sim("sim0").live_runners() == 0, "runners still alive after kill");
    ensure!(state(&long)? == "Killed", "status after kill: {}", state(&long)?);

    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1} s");
    Ok(format!(
        "Queued -> Running -> Succeeded, merged logs with rank tags, rank-namespaced get, kill stopped {runners} runners"
    ))
}

// --------------------------------------------------------------- 10 ----

fn c10_online() -> Outcome {
    const SESSIONS: usize = 50;
    let dir = tempfile::tempdir().unwrap();
    let mut served = Served::start(&dir.path().join("server"), 2, 8);
    served.start_ticker();
    let endpoint: Endpoint = served.addr.parse().map_err(|e| format!("{e}"))?;
    let root = Arc::new(dir.path().join("clients"));
    let handles: Vec<_> = (0..SESSIONS)
        .map(|i| {
            let endpoint = endpoint.clone();
            let root = root.clone();
            std::thread::spawn(move || -> Result<JobId, String> {
                let ws = root.join(format!("ws{i}"));
                std::fs::create_dir_all(&ws).map_err(|e| e.to_string())?;
                std::fs::write(ws.join("train.py"), format!("print({i})\n")).map_err(|e| e.to_string())?;
                let spec = sim_spec(&format!("job{i}"), &format!("user{}", i % 5), 1 + (i % 4) as u32, 1, 5);
                let store = MemStore::new();
                let manifest = build_bundle(&spec, &ws, &store, BuildOptions::default()).map_err(|e| e.to_string())?;
                let mut client = ProtoClient::connect(&endpoint).map_err(|e| e.to_string())?;
                client.upload_bundle(&manifest, &store).map_err(|e| e.to_string())?;
                client.submit(&spec.to_value().to_string(), manifest.bundle_id).map_err(|e| e.to_string())
            })
        })
        .collect();
    let mut ids = Vec::new();
    for h in handles {
        ids.push(h.join().map_err(|_| "session thread panicked")??);
    }
    let unique: BTreeSet<JobId> = ids.iter().copied().collect();
    ensure!(unique.len() == SESSIONS, "{} distinct ids for {SESSIONS} sessions", unique.len());
    let want: BTreeSet<JobId> = (1..=SESSIONS as u64).map(JobId).collect();
    ensure!(unique == want, "ids are not 1..={SESSIONS}: {unique:?}");

    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let state = served.ctl().state();
        if state.jobs.len() == SESSIONS && state.jobs.values().all(|j| j.state == JobState::Succeeded) {
            break;
        }
        ensure!(Instant::now() < deadline, "not every job finished: {:?}",
            state.jobs.values().map(|j| j.state).collect::<Vec<_>>());
        std::thread::sleep(Duration::from_millis(20));
    }
    let (events, _) = read_log(served.ctl().data_dir()).map_err(|e| e.to_string())?;
    let order: Vec<JobId> = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Submitted { .. }))
        .filter_map(|e| e.job_id)
        .collect();
    ensure!(order.windows(2).all(|w| w[0] < w[1]), "ids not assigned in log order");
    ensure!(order.len() == SESSIONS, "{} submissions logged", order.len());
    Ok(format!("{SESSIONS} concurrent sessions -> ids 1..={SESSIONS} in log order, all scheduled and succeeded"))
}
