//! Protocol sessions. Each connection gets its own thread and talks to the
//! controller only through its public operations.

use std::io;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tacc_core::bundle::{BundleManifest, ObjectStore};
use tacc_core::ErrorCode;
use tacc_proto::messages::*;
use tacc_proto::{archive, Conn, Envelope, ProtoError, PROTOCOL_VERSION};

use crate::controller::{Controller, CtlError};

/// How often a following log reader rechecks the job state.
const FOLLOW_POLL: Duration = Duration::from_millis(200);

/// Accept connections until the controller shuts down.
pub fn serve(ctl: Arc<Controller>, listener: TcpListener) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !ctl.is_shut_down() {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                let ctl = ctl.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_tcp(ctl, stream) {
                        log::debug!("session {peer}: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn serve_tcp(ctl: Arc<Controller>, stream: TcpStream) -> Result<(), ProtoError> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    Session::new(ctl, Conn::new(Box::new(reader), Box::new(stream))).run()
}

/// Failure of one request: reported to the client, the session continues.
enum Fail {
    Reply(ErrorCode, String),
    /// The byte stream is unusable; end the session.
    Fatal(ProtoError),
}

impl From<CtlError> for Fail {
    fn from(e: CtlError) -> Self {
        Fail::Reply(e.code, e.message)
    }
}

impl From<ProtoError> for Fail {
    fn from(e: ProtoError) -> Self {
        match e {
            ProtoError::Protocol(m) => Fail::Reply(ErrorCode::ProtocolError, m),
            ProtoError::Remote { code, message } => Fail::Reply(code, message),
            other => Fail::Fatal(other),
        }
    }
}

fn io_fail(e: io::Error) -> Fail {
    Fail::Reply(ErrorCode::IoError, e.to_string())
}

pub struct Session {
    ctl: Arc<Controller>,
    conn: Conn,
    greeted: bool,
}

impl Session {
    pub fn new(ctl: Arc<Controller>, conn: Conn) -> Self {
        Session { ctl, conn, greeted: false }
    }

    pub fn run(mut self) -> Result<(), ProtoError> {
        while let Some(env) = self.conn.recv()? {
            match self.dispatch(&env) {
                Ok(()) => {}
                Err(Fail::Reply(code, message)) => self.conn.send(&Envelope::error(env.id.clone(), code, message))?,
                Err(Fail::Fatal(e)) => return Err(e),
            }
        }
        Ok(())
    }

    fn reply(&mut self, req: &Envelope, payload: impl Serialize) -> Result<(), Fail> {
        self.conn.send(&Envelope::new(req.id.clone(), &req.kind, payload)).map_err(Fail::Fatal)
    }

    fn body<T: DeserializeOwned>(req: &Envelope) -> Result<T, Fail> {
        req.decode().map_err(Fail::from)
    }

    fn dispatch(&mut self, req: &Envelope) -> Result<(), Fail> {
        if req.kind == MSG_HELLO {
            let hello: Hello = Session::body(req)?;
            if hello.version != PROTOCOL_VERSION {
                return Err(Fail::Reply(
                    ErrorCode::ProtocolError,
                    format!("client speaks protocol {}, server speaks {PROTOCOL_VERSION}", hello.version),
                ));
            }
            self.greeted = true;
            let server = format!("controld/{}", env!("CARGO_PKG_VERSION"));
            return self.reply(req, HelloReply { version: PROTOCOL_VERSION, server });
        }
        if !self.greeted {
            return Err(Fail::Reply(ErrorCode::ProtocolError, "HELLO must come first".into()));
        }
        match req.kind.as_str() {
            MSG_CAS_CHECK => {
                let body: CasCheck = Session::body(req)?;
                let store = self.ctl.store();
                let missing =
                    body.hashes.into_iter().filter(|h| !store.has_object(h) && !store.has_manifest(h)).collect();
                self.reply(req, CasCheckReply { missing })
            }
            MSG_CAS_PUT => self.cas_put(req),
            MSG_SUBMIT => {
                let body: Submit = Session::body(req)?;
                let job_id = self.ctl.submit(&body.spec_doc, body.manifest)?;
                self.reply(req, SubmitReply { job_id })
            }
            MSG_LIST => {
                let body: List = Session::body(req)?;
                let jobs = self.ctl.list(&body.filter)?;
                self.reply(req, ListReply { jobs })
            }
            MSG_STATUS => {
                let body: JobRef = Session::body(req)?;
                let summary = self.ctl.status(body.job_id)?;
                self.reply(req, summary)
            }
            MSG_LOGS => self.logs(req),
            MSG_FETCH => {
                let body: Fetch = Session::body(req)?;
                let files = self.ctl.fetch(body.job_id, &body.glob)?;
                let names: Vec<String> = files.iter().map(|f| format!("rank{}/{}", f.rank, f.path)).collect();
                let bytes = archive::pack(names.iter().map(String::as_str).zip(files.iter().map(|f| f.bytes.as_slice())))
                    .map_err(io_fail)?;
                self.reply(req, FetchReply { entries: files.len() as u64, bytes: bytes.len() as u64 })?;
                self.conn.send_blob(&bytes).map_err(Fail::Fatal)?;
                Ok(())
            }
            MSG_KILL => {
                let body: JobRef = Session::body(req)?;
                let state = self.ctl.kill(body.job_id)?;
                self.reply(req, KillReply { job_id: body.job_id, state: state.to_string() })
            }
            other => Err(Fail::Reply(ErrorCode::ProtocolError, format!("unknown message type {other}"))),
        }
    }

    fn cas_put(&mut self, req: &Envelope) -> Result<(), Fail> {
        let body: CasPut = Session::body(req)?;
        // The binary frame follows regardless of whether the header was
        // acceptable; read it so the stream stays in sync.
        let (digest, bytes) = self.conn.recv_blob().map_err(Fail::Fatal)?;
        let store = self.ctl.store();
        let reply = match body.kind {
            CasKind::Object => {
                let stored = !store.has_object(&digest);
                let id = store.put_object(&bytes).map_err(io_fail)?;
                CasPutReply { id, stored }
            }
            CasKind::Manifest => {
                let text = std::str::from_utf8(&bytes)
                    .map_err(|_| Fail::Reply(ErrorCode::ProtocolError, "manifest is not UTF-8".into()))?;
                let manifest = BundleManifest::from_canonical_text(text)
                    .map_err(|e| Fail::Reply(ErrorCode::SchemaInvalid, e.to_string()))?;
                let stored = !store.has_manifest(&manifest.bundle_id);
                store.put_manifest(&manifest).map_err(io_fail)?;
                CasPutReply { id: manifest.bundle_id, stored }
            }
        };
        self.ctl.note_upload();
        self.reply(req, reply)
    }

    /// Stream merged lines after `since_seq`. Without `follow` the stream
    /// ends at the current tail; with it, once the job is terminal and
    /// everything has been sent.
    fn logs(&mut self, req: &Envelope) -> Result<(), Fail> {
        let body: Logs = Session::body(req)?;
        self.ctl.status(body.job_id)?;
        let mut seq = body.since_seq;
        loop {
            let terminal = self.ctl.job(body.job_id).is_none_or(|j| j.state.is_terminal());
            let (lines, _) = if body.follow && !terminal {
                self.ctl.logs().wait_since(body.job_id, seq, FOLLOW_POLL)
            } else {
                self.ctl.logs().since(body.job_id, seq)
            };
            for line in &lines {
                self.reply(req, line)?;
                seq = line.seq;
            }
            if (!body.follow || terminal || self.ctl.is_shut_down()) && lines.is_empty() {
                return self.reply(req, LogFrame::Eof { eof: true });
            }
        }
    }
}
