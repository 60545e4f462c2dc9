use std::collections::HashSet;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tacc_core::bundle::{plan_upload, BundleManifest, ObjectStore};
use tacc_core::{Digest, JobId};

use crate::frame::{Conn, Envelope, ProtoError};
use crate::messages::*;
use crate::transport::{connect, Endpoint};
use crate::PROTOCOL_VERSION;

/// Upload accounting for one session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub cas_put_frames: u64,
    pub objects_uploaded: u64,
    pub manifests_uploaded: u64,
    /// Binary payload bytes sent in `CAS_PUT` frames.
    pub bytes_uploaded: u64,
}

/// A protocol session with a controller.
pub struct Client {
    conn: Conn,
    next_id: u64,
    pub server: String,
    pub stats: SessionStats,
}

impl Client {
    pub fn connect(endpoint: &Endpoint) -> Result<Client, ProtoError> {
        Client::handshake(connect(endpoint)?)
    }

    pub fn handshake(conn: Conn) -> Result<Client, ProtoError> {
        let mut client = Client { conn, next_id: 0, server: String::new(), stats: SessionStats::default() };
        let reply: HelloReply = client.request(
            MSG_HELLO,
            Hello { version: PROTOCOL_VERSION, client: format!("tcloud/{}", env!("CARGO_PKG_VERSION")) },
        )?;
        if reply.version != PROTOCOL_VERSION {
            return Err(ProtoError::Protocol(format!(
                "server speaks protocol {}, client speaks {PROTOCOL_VERSION}",
                reply.version
            )));
        }
        client.server = reply.server;
        Ok(client)
    }

    fn send(&mut self, kind: &str, payload: impl Serialize) -> Result<String, ProtoError> {
        self.next_id += 1;
        let id = self.next_id.to_string();
        self.conn.send(&Envelope::new(id.clone(), kind, payload))?;
        Ok(id)
    }

    fn reply(&mut self, id: &str, kind: &str) -> Result<Envelope, ProtoError> {
        let env = self.conn.recv_required()?;
        if let Some(err) = env.as_error() {
            return Err(ProtoError::Remote { code: err.code, message: err.message });
        }
        if env.id != id || env.kind != kind {
            return Err(ProtoError::Protocol(format!("expected {kind} reply to {id}, got {} for {}", env.kind, env.id)));
        }
        Ok(env)
    }

    fn request<R: DeserializeOwned>(&mut self, kind: &str, payload: impl Serialize) -> Result<R, ProtoError> {
        let id = self.send(kind, payload)?;
        self.reply(&id, kind)?.decode()
    }

    /// Send any request and return the raw reply payload.
    pub fn raw(&mut self, kind: &str, payload: serde_json::Value) -> Result<serde_json::Value, ProtoError> {
        let id = self.send(kind, payload)?;
        Ok(self.reply(&id, kind)?.payload)
    }

    pub fn cas_check(&mut self, hashes: Vec<Digest>) -> Result<Vec<Digest>, ProtoError> {
        let reply: CasCheckReply = self.request(MSG_CAS_CHECK, CasCheck { hashes })?;
        Ok(reply.missing)
    }

    fn cas_put(&mut self, kind: CasKind, bytes: &[u8]) -> Result<CasPutReply, ProtoError> {
        let id = self.send(MSG_CAS_PUT, CasPut { kind })?;
        self.conn.send_blob(bytes)?;
        self.stats.cas_put_frames += 1;
        self.stats.bytes_uploaded += bytes.len() as u64;
        match kind {
            CasKind::Object => self.stats.objects_uploaded += 1,
            CasKind::Manifest => self.stats.manifests_uploaded += 1,
        }
        self.reply(&id, MSG_CAS_PUT)?.decode()
    }

    pub fn cas_put_object(&mut self, bytes: &[u8]) -> Result<CasPutReply, ProtoError> {
        self.cas_put(CasKind::Object, bytes)
    }

    pub fn cas_put_manifest(&mut self, manifest: &BundleManifest) -> Result<CasPutReply, ProtoError> {
        self.cas_put(CasKind::Manifest, manifest.canonical_text().as_bytes())
    }

    /// Upload whatever the controller lacks of a bundle: missing objects
    /// first, then the manifest.
    pub fn upload_bundle(&mut self, manifest: &BundleManifest, store: &dyn ObjectStore) -> Result<(), ProtoError> {
        let mut hashes: Vec<Digest> = manifest.objects().into_iter().map(|c| c.id).collect();
        hashes.push(manifest.bundle_id);
        let missing: HashSet<Digest> = self.cas_check(hashes.clone())?.into_iter().collect();
        let present: HashSet<Digest> = hashes.into_iter().filter(|h| !missing.contains(h)).collect();
        let plan = plan_upload(manifest, &present);
        for (id, _) in &plan.missing_objects {
            let bytes = store
                .get_object(id)
                .map_err(ProtoError::Io)?
                .ok_or_else(|| ProtoError::Protocol(format!("local store lacks object {id}")))?;
            self.cas_put_object(&bytes)?;
        }
        if plan.manifest_required {
            self.cas_put_manifest(manifest)?;
        }
        Ok(())
    }

    pub fn submit(&mut self, spec_doc: &str, manifest: Digest) -> Result<JobId, ProtoError> {
        let reply: SubmitReply = self.request(MSG_SUBMIT, Submit { spec_doc: spec_doc.to_string(), manifest })?;
        Ok(reply.job_id)
    }

    pub fn list(&mut self, filter: ListFilter) -> Result<Vec<JobSummary>, ProtoError> {
        let reply: ListReply = self.request(MSG_LIST, List { filter })?;
        Ok(reply.jobs)
    }

    pub fn status(&mut self, job_id: JobId) -> Result<JobSummary, ProtoError> {
        self.request(MSG_STATUS, JobRef { job_id })
    }

    /// Stream merged log lines to `on_line` until the server sends `eof`.
    pub fn logs(
        &mut self,
        job_id: JobId,
        follow: bool,
        since_seq: u64,
        mut on_line: impl FnMut(&LogLine),
    ) -> Result<(), ProtoError> {
        let id = self.send(MSG_LOGS, Logs { job_id, follow, since_seq })?;
        loop {
            match self.reply(&id, MSG_LOGS)?.decode::<LogFrame>()? {
                LogFrame::Eof { .. } => return Ok(()),
                LogFrame::Line(line) => on_line(&line),
            }
        }
    }

    /// A tar archive of matching files, namespaced `rank<k>/`.
    pub fn fetch(&mut self, job_id: JobId, glob: &str) -> Result<Vec<u8>, ProtoError> {
        let id = self.send(MSG_FETCH, Fetch { job_id, glob: glob.to_string() })?;
        let header: FetchReply = self.reply(&id, MSG_FETCH)?.decode()?;
        let (_, bytes) = self.conn.recv_blob()?;
        if bytes.len() as u64 != header.bytes {
            return Err(ProtoError::Protocol("archive size does not match header".into()));
        }
        Ok(bytes)
    }

    pub fn kill(&mut self, job_id: JobId) -> Result<KillReply, ProtoError> {
        self.request(MSG_KILL, JobRef { job_id })
    }
}
