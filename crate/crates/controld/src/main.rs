use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tacc_controld::{Config, Controller};

#[derive(Parser)]
#[command(name = "controld", version, about = "Task orchestration controller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the controller.
    Serve {
        /// Path to controld.json. Built-in defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the listen address from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Bridge stdin/stdout to a local controller (remote end of `ssh:`
    /// endpoints).
    Proxy {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { config, listen } => serve(config, listen),
        Command::Proxy { port, host } => proxy(&host, port),
    }
}

fn serve(config: Option<PathBuf>, listen: Option<String>) -> Result<()> {
    let mut config = match config {
        Some(path) => Config::load(&path)?,
        None => Config::default(),
    };
    if let Some(addr) = listen {
        config.listen = addr;
    }
    let listener = TcpListener::bind(&config.listen).with_context(|| format!("binding {}", config.listen))?;
    let ctl = Controller::open(config).map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(c) = &ctl.recovery.corrupt {
        log::warn!("event log was corrupt at seq {} ({}); truncated", c.seq, c.reason);
    }
    log::info!(
        "listening on {} ({} events replayed, {} jobs requeued)",
        listener.local_addr()?,
        ctl.recovery.replayed,
        ctl.recovery.requeued.len()
    );
    let ticker = {
        let ctl = Arc::clone(&ctl);
        thread::spawn(move || ctl.run())
    };
    tacc_controld::server::serve(ctl, listener)?;
    ticker.join().map_err(|_| anyhow::anyhow!("tick thread panicked"))?;
    Ok(())
}

fn proxy(host: &str, port: u16) -> Result<()> {
    let stream = TcpStream::connect((host, port)).with_context(|| format!("connecting to {host}:{port}"))?;
    let mut upstream = stream.try_clone()?;
    let to_server = thread::spawn(move || {
        let _ = std::io::copy(&mut std::io::stdin().lock(), &mut upstream);
        let _ = upstream.shutdown(Shutdown::Write);
    });
    let mut downstream = stream;
    let mut out = std::io::stdout().lock();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = downstream.read(&mut buf)?;
        if n == 0 {
            break;
        }
        out.write_all(&buf[..n])?;
        out.flush()?;
    }
    drop(to_server);
    Ok(())
}
