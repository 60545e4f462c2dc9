use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tacc_core::{Digest, ErrorCode};

use crate::messages::{ErrorBody, ErrorPayload, MSG_ERROR};

/// Longest accepted envelope line.
pub const MAX_LINE_BYTES: usize = 16 << 20;
/// Largest accepted binary frame.
pub const MAX_BLOB_BYTES: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub payload: Value,
}

impl Envelope {
    pub fn new(id: impl Into<String>, kind: &str, payload: impl Serialize) -> Self {
        Envelope { id: id.into(), kind: kind.to_string(), payload: serde_json::to_value(payload).expect("payload serializes") }
    }

    pub fn error(id: impl Into<String>, code: ErrorCode, message: impl Into<String>) -> Self {
        Envelope::new(id, MSG_ERROR, ErrorPayload { error: ErrorBody { code, message: message.into() } })
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, ProtoError> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| ProtoError::Protocol(format!("bad {} payload: {e}", self.kind)))
    }

    /// The error carried by an `ERROR` envelope, if this is one.
    pub fn as_error(&self) -> Option<ErrorBody> {
        if self.kind != MSG_ERROR {
            return None;
        }
        Some(self.decode::<ErrorPayload>().map(|p| p.error).unwrap_or_else(|e| ErrorBody {
            code: ErrorCode::ProtocolError,
            message: e.to_string(),
        }))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProtoError {
    #[error("connection error: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("PROTOCOL_ERROR: {0}")]
    Protocol(String),
    #[error("{code}: {message}")]
    Remote { code: ErrorCode, message: String },
}

impl ProtoError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ProtoError::Io(_) | ProtoError::Closed => ErrorCode::IoError,
            ProtoError::Protocol(_) => ErrorCode::ProtocolError,
            ProtoError::Remote { code, .. } => *code,
        }
    }

    /// True for failures of the byte stream itself.
    pub fn is_connectivity(&self) -> bool {
        matches!(self, ProtoError::Io(_) | ProtoError::Closed)
    }
}

/// A framed duplex byte stream.
pub struct Conn {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: BufWriter<Box<dyn Write + Send>>,
    /// Payload bytes written in binary frames.
    pub blob_bytes_sent: u64,
    pub blob_frames_sent: u64,
    /// Transport process (ssh or a local command) owned by this connection.
    child: Option<std::process::Child>,
}

impl Conn {
    pub fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Conn {
            reader: BufReader::with_capacity(64 << 10, reader),
            writer: BufWriter::with_capacity(64 << 10, writer),
            blob_bytes_sent: 0,
            blob_frames_sent: 0,
            child: None,
        }
    }

    pub(crate) fn with_child(mut self, child: std::process::Child) -> Self {
        self.child = Some(child);
        self
    }

    pub fn send(&mut self, env: &Envelope) -> Result<(), ProtoError> {
        let mut line = serde_json::to_vec(env).map_err(|e| ProtoError::Protocol(e.to_string()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Next envelope, or `None` on a clean end of stream.
    pub fn recv(&mut self) -> Result<Option<Envelope>, ProtoError> {
        let mut line = Vec::new();
        let n = (&mut self.reader).take(MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(None);
        }
        if line.last() != Some(&b'\n') {
            return Err(if line.len() > MAX_LINE_BYTES {
                ProtoError::Protocol("frame too long".into())
            } else {
                ProtoError::Closed
            });
        }
        line.pop();
        let text = std::str::from_utf8(&line).map_err(|_| ProtoError::Protocol("frame is not UTF-8".into()))?;
        serde_json::from_str(text).map(Some).map_err(|e| ProtoError::Protocol(format!("bad envelope: {e}")))
    }

    /// Like [`recv`](Conn::recv), but end of stream is an error.
    pub fn recv_required(&mut self) -> Result<Envelope, ProtoError> {
        self.recv()?.ok_or(ProtoError::Closed)
    }

    pub fn send_blob(&mut self, bytes: &[u8]) -> Result<Digest, ProtoError> {
        let digest = Digest::of(bytes);
        self.writer.write_all(&digest.0)?;
        self.writer.write_all(&(bytes.len() as u64).to_be_bytes())?;
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        self.blob_bytes_sent += bytes.len() as u64;
        self.blob_frames_sent += 1;
        Ok(digest)
    }

    /// Read a binary frame and verify its digest.
    pub fn recv_blob(&mut self) -> Result<(Digest, Vec<u8>), ProtoError> {
        let mut digest = [0u8; 32];
        self.reader.read_exact(&mut digest)?;
        let mut len = [0u8; 8];
        self.reader.read_exact(&mut len)?;
        let len = u64::from_be_bytes(len);
        if len > MAX_BLOB_BYTES {
            return Err(ProtoError::Protocol(format!("binary frame of {len} bytes is too large")));
        }
        let mut bytes = vec![0u8; len as usize];
        self.reader.read_exact(&mut bytes)?;
        let digest = Digest(digest);
        if Digest::of(&bytes) != digest {
            return Err(ProtoError::Protocol(format!("binary frame does not match digest {digest}")));
        }
        Ok((digest, bytes))
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = self.writer.flush();
            // Closing stdin lets a well-behaved transport exit on its own.
            self.writer = BufWriter::new(Box::new(io::sink()));
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
