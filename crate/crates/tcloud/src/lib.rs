//! `tcloud`: the command-line client for a controller.
//!
//! Every command opens at most one protocol session to the selected
//! cluster. Exit codes: 0 success, 2 local or usage error, 3 connectivity,
//! 4 error reported by the server.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;
use tacc_core::bundle::{build_bundle, BuildOptions, MemStore};
use tacc_core::schema::parse_task_spec;
use tacc_core::{ErrorCode, JobId};
use tacc_proto::messages::{JobSummary, ListFilter, LogLine};
use tacc_proto::{archive, Client, Endpoint, ProtoError};

use config::{config_path, use_cluster, Cluster, ClusterConfig, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_LOCAL: i32 = 2;
pub const EXIT_CONNECT: i32 = 3;
pub const EXIT_SERVER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tcloud", version, about = "Submit and manage tasks on a cluster")]
pub struct Cli {
    /// Use this configured cluster instead of the current one.
    #[arg(long, global = true)]
    pub cluster: Option<String>,
    /// Print raw protocol payloads as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bundle a workspace and submit a task.
    Submit {
        task_file: PathBuf,
        /// Workspace root; defaults to the task file's directory.
        #[arg(long)]
        workspace: Option<PathBuf>,
    },
    /// Show one job, or all jobs matching a filter.
    Status(StatusArgs),
    /// Print the merged log stream of a job.
    Logs {
        job: JobId,
        /// Keep streaming until the job finishes.
        #[arg(long)]
        follow: bool,
        /// Only lines after this sequence number.
        #[arg(long, default_value_t = 0)]
        since: u64,
    },
    /// Download output files matching a glob.
    Get {
        job: JobId,
        glob: String,
        #[arg(long, default_value = ".")]
        dest: PathBuf,
    },
    /// Stop a job on every node.
    Kill { job: JobId },
    /// Show or switch the configured clusters.
    Cluster {
        #[command(subcommand)]
        action: ClusterAction,
    },
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["job", "all"])))]
pub struct StatusArgs {
    pub job: Option<JobId>,
    #[arg(long)]
    pub all: bool,
    /// With --all: only this user's jobs.
    #[arg(long, requires = "all")]
    pub user: Option<String>,
    /// With --all: only jobs in these states (repeatable).
    #[arg(long = "state", requires = "all")]
    pub states: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum ClusterAction {
    List,
    Use { name: String },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Local(String),
    #[error("{0}")]
    Connect(String),
    #[error("{code}: {message}")]
    Server { code: ErrorCode, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Local(_) => EXIT_LOCAL,
            CliError::Connect(_) => EXIT_CONNECT,
            CliError::Server { .. } => EXIT_SERVER,
        }
    }
}

impl From<ProtoError> for CliError {
    fn from(e: ProtoError) -> Self {
        match e {
            ProtoError::Remote { code, message } => CliError::Server { code, message },
            // A peer that does not speak the protocol is as unusable as one
            // that cannot be reached.
            other => CliError::Connect(other.to_string()),
        }
    }
}

fn output(e: std::io::Error) -> CliError {
    CliError::Local(format!("writing output: {e}"))
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_LOCAL
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "tcloud: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let path = config_path();
    let config = ClusterConfig::load_or_create(&path).map_err(|e| CliError::Local(e.to_string()))?;
    let session = Session { cli, config: &config };
    match &cli.command {
        Command::Submit { task_file, workspace } => session.submit(task_file, workspace.as_deref(), out, err),
        Command::Status(args) => session.status(args, out),
        Command::Logs { job, follow, since } => session.logs(*job, *follow, *since, out),
        Command::Get { job, glob, dest } => session.get(*job, glob, dest, out, err),
        Command::Kill { job } => session.kill(*job, out),
        Command::Cluster { action: ClusterAction::List } => cluster_list(&config, cli.json, out),
        Command::Cluster { action: ClusterAction::Use { name } } => {
            use_cluster(&path, name).map_err(|e| CliError::Local(e.to_string()))?;
            writeln!(out, "current cluster: {name}").map_err(output)
        }
    }
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string(value).expect("payload serializes");
    writeln!(out, "{text}").map_err(output)
}

struct Session<'a> {
    cli: &'a Cli,
    config: &'a ClusterConfig,
}

impl Session<'_> {
    fn target(&self) -> Result<&Cluster, CliError> {
        match &self.cli.cluster {
            Some(name) => self.config.cluster(name).map_err(|e| match e {
                ConfigError::UnknownCluster(_) => CliError::Connect(e.to_string()),
                other => CliError::Local(other.to_string()),
            }),
            None => Ok(self.config.current()),
        }
    }

    fn connect(&self) -> Result<Client, CliError> {
        let cluster = self.target()?;
        let endpoint: Endpoint =
            cluster.endpoint.parse().map_err(|e| CliError::Local(format!("cluster `{}`: {e}", cluster.name)))?;
        Client::connect(&endpoint).map_err(|e| match e {
            ProtoError::Remote { .. } => CliError::from(e),
            other => CliError::Connect(format!("cluster `{}` at {}: {other}", cluster.name, cluster.endpoint)),
        })
    }

    fn submit(
        &self,
        task_file: &Path,
        workspace: Option<&Path>,
        out: &mut dyn Write,
        err: &mut dyn Write,
    ) -> Result<(), CliError> {
        let text = std::fs::read_to_string(task_file)
            .map_err(|e| CliError::Local(format!("reading {}: {e}", task_file.display())))?;
        let spec = parse_task_spec(&text)
            .map_err(|e| CliError::Local(format!("SCHEMA_INVALID at {}: {}", e.path, e.reason)))?;
        let workspace = match workspace {
            Some(w) => w.to_path_buf(),
            None => match task_file.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            },
        };
        let store = MemStore::new();
        let manifest = build_bundle(&spec, &workspace, &store, BuildOptions::default())
            .map_err(|e| CliError::Local(e.to_string()))?;
        let mut client = self.connect()?;
        client.upload_bundle(&manifest, &store)?;
        let job_id = client.submit(&text, manifest.bundle_id)?;
        let s = client.stats;
        writeln!(
            err,
            "uploaded {} objects and {} manifest ({} bytes, {} CAS_PUT frames)",
            s.objects_uploaded, s.manifests_uploaded, s.bytes_uploaded, s.cas_put_frames
        )
        .map_err(output)?;
        if self.cli.json {
            print_json(out, &tacc_proto::messages::SubmitReply { job_id })
        } else {
            writeln!(out, "{job_id}").map_err(output)
        }
    }

    fn status(&self, args: &StatusArgs, out: &mut dyn Write) -> Result<(), CliError> {
        let mut client = self.connect()?;
        if let Some(job) = args.job {
            let summary = client.status(job)?;
            if self.cli.json {
                return print_json(out, &summary);
            }
            write!(out, "{}", render_table(std::slice::from_ref(&summary))).map_err(output)?;
            if let Some(reason) = &summary.reason {
                writeln!(out, "reason: {reason}").map_err(output)?;
            }
            if let Some(trace) = &summary.selection {
                writeln!(out, "backends tried: {}", trace.backends.join(" -> ")).map_err(output)?;
            }
            return Ok(());
        }
        let user = args.user.clone().or_else(|| self.target().ok().and_then(|c| c.defaults.user.clone()));
        let states = (!args.states.is_empty()).then(|| args.states.clone());
        let jobs = client.list(ListFilter { user, states })?;
        if self.cli.json {
            return print_json(out, &tacc_proto::messages::ListReply { jobs });
        }
        write!(out, "{}", render_table(&jobs)).map_err(output)
    }

    /// With `follow`, a connection that breaks mid-stream is reopened once,
    /// resuming after the last line printed.
    fn logs(&self, job: JobId, follow: bool, since: u64, out: &mut dyn Write) -> Result<(), CliError> {
        let mut last = since;
        let mut retried = false;
        loop {
            let mut write_err = None;
            let result = self.connect().and_then(|mut client| {
                client
                    .logs(job, follow, last, |line| {
                        if write_err.is_some() {
                            return;
                        }
                        let r = if self.cli.json {
                            writeln!(out, "{}", serde_json::to_string(line).expect("line serializes"))
                        } else {
                            writeln!(out, "{}", format_log_line(line))
                        };
                        match r.and_then(|_| out.flush()) {
                            Ok(()) => last = line.seq,
                            Err(e) => write_err = Some(e),
                        }
                    })
                    .map_err(CliError::from)
            });
            if let Some(e) = write_err {
                return Err(output(e));
            }
            match result {
                Err(CliError::Connect(_)) if follow && !retried => retried = true,
                other => return other,
            }
        }
    }

    fn get(&self, job: JobId, glob: &str, dest: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
        std::fs::create_dir_all(dest).map_err(|e| CliError::Local(format!("creating {}: {e}", dest.display())))?;
        let mut client = self.connect()?;
        let bytes = client.fetch(job, glob)?;
        let names = archive::unpack(&bytes, dest)
            .map_err(|e| CliError::Local(format!("extracting into {}: {e}", dest.display())))?;
        if names.is_empty() {
            writeln!(err, "no files of job {job} match `{glob}`").map_err(output)?;
        }
        if self.cli.json {
            #[derive(Serialize)]
            struct Fetched<'a> {
                entries: usize,
                files: &'a [String],
            }
            return print_json(out, &Fetched { entries: names.len(), files: &names });
        }
        for name in &names {
            writeln!(out, "{}", dest.join(name).display()).map_err(output)?;
        }
        Ok(())
    }

    fn kill(&self, job: JobId, out: &mut dyn Write) -> Result<(), CliError> {
        let mut client = self.connect()?;
        let reply = client.kill(job)?;
        if self.cli.json {
            print_json(out, &reply)
        } else {
            writeln!(out, "{} {}", reply.job_id, reply.state).map_err(output)
        }
    }
}

fn cluster_list(config: &ClusterConfig, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    if json {
        return print_json(out, config);
    }
    let width = config.clusters.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &config.clusters {
        let mark = if c.name == config.current { '*' } else { ' ' };
        writeln!(out, "{mark} {:width$}  {}", c.name, c.endpoint).map_err(output)?;
    }
    Ok(())
}

pub fn format_log_line(line: &LogLine) -> String {
    format!("[{}] {}", line.rank, line.line)
}

pub const STATUS_COLUMNS: [&str; 6] = ["JOB", "USER", "STATE", "AGE", "NODES", "BACKEND"];

/// `Succeeded(0,0)`; ranks without an exit code yet show `-`.
pub fn format_state(job: &JobSummary) -> String {
    if job.exit_codes.iter().all(Option::is_none) {
        return job.state.clone();
    }
    let codes: Vec<String> = job.exit_codes.iter().map(|c| c.map_or_else(|| "-".into(), |c| c.to_string())).collect();
    format!("{}({})", job.state, codes.join(","))
}

pub fn format_age(secs: u64) -> String {
    match secs {
        s if s < 60 => format!("{s}s"),
        s if s < 3600 => format!("{}m", s / 60),
        s if s < 86400 => format!("{}h", s / 3600),
        s => format!("{}d", s / 86400),
    }
}

pub fn render_table(jobs: &[JobSummary]) -> String {
    let rows: Vec<[String; 6]> = jobs
        .iter()
        .map(|j| {
            [
                j.job_id.to_string(),
                j.user.clone(),
                format_state(j),
                format_age(j.now_s.saturating_sub(j.submit_time_s)),
                j.nodes.to_string(),
                j.backend.clone().unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let mut widths = STATUS_COLUMNS.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(widths).map(|(c, w)| format!("{c:w$}")).collect();
        text.push_str(parts.join("  ").trim_end());
        text.push('\n');
    };
    line(&mut STATUS_COLUMNS.iter().copied());
    for row in &rows {
        line(&mut row.iter().map(String::as_str));
    }
    text
}
