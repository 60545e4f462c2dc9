use std::fmt;
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::Duration;

use crate::frame::{Conn, ProtoError};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Where a controller listens.
///
/// - `host:port`: plain TCP.
/// - `ssh:<target> [remote command]`: runs the remote command over `ssh`
///   and speaks the protocol on its stdio. The default remote command is
///   `controld proxy`, which bridges to the controller's local port.
/// - `exec:<command>`: runs a local shell command and speaks the protocol on
///   its stdio.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Ssh { target: String, remote_command: Vec<String> },
    Exec(String),
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("ssh:") {
            let mut words = rest.split_whitespace();
            let target = words.next().ok_or("ssh endpoint needs a target")?.to_string();
            let mut remote_command: Vec<String> = words.map(str::to_string).collect();
            if remote_command.is_empty() {
                remote_command = vec!["controld".into(), "proxy".into()];
            }
            return Ok(Endpoint::Ssh { target, remote_command });
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err("exec endpoint needs a command".into());
            }
            return Ok(Endpoint::Exec(cmd.trim().to_string()));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(addr.to_string())),
            _ => Err(format!("endpoint `{s}` is not host:port, ssh:<target> or exec:<command>")),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => f.write_str(addr),
            Endpoint::Ssh { target, remote_command } => write!(f, "ssh:{target} {}", remote_command.join(" ")),
            Endpoint::Exec(cmd) => write!(f, "exec:{cmd}"),
        }
    }
}

fn spawn_stdio(mut cmd: Command) -> Result<Conn, ProtoError> {
    let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn()?;
    let stdout = child.stdout.take().expect("piped");
    let stdin = child.stdin.take().expect("piped");
    Ok(Conn::new(Box::new(stdout), Box::new(stdin)).with_child(child))
}

/// Open a raw connection (no `HELLO` yet).
pub fn connect(endpoint: &Endpoint) -> Result<Conn, ProtoError> {
    match endpoint {
        Endpoint::Tcp(addr) => {
            let mut last = None;
            for sa in addr.to_socket_addrs()? {
                match TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT) {
                    Ok(stream) => {
                        stream.set_nodelay(true)?;
                        let reader = stream.try_clone()?;
                        return Ok(Conn::new(Box::new(reader), Box::new(stream)));
                    }
                    Err(e) => last = Some(e),
                }
            }
            Err(last.map_or_else(|| ProtoError::Protocol(format!("{addr} resolves to nothing")), ProtoError::Io))
        }
        Endpoint::Ssh { target, remote_command } => {
            let mut cmd = Command::new("ssh");
            cmd.args(["-T", "-o", "BatchMode=yes", target]).args(remote_command);
            spawn_stdio(cmd)
        }
        Endpoint::Exec(command) => {
            let mut cmd = Command::new("sh");
            cmd.arg("-c").arg(command);
            spawn_stdio(cmd)
        }
    }
}
