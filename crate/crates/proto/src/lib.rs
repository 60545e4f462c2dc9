//! Wire protocol between `tcloud` and the controller.
//!
//! Frames are newline-delimited UTF-8 JSON envelopes
//! `{"id": ..., "type": ..., "payload": {...}}`. Two message types carry a
//! binary frame right after their envelope line: `CAS_PUT` (client to
//! server) and the `FETCH` reply (server to client). A binary frame is a
//! 32-byte SHA-256 digest of the body, an 8-byte big-endian length, and the
//! body itself.
//!
//! The same byte stream runs over TCP, over `ssh` to a remote `controld
//! proxy`, or over any local command speaking the protocol on stdio.

pub mod archive;
mod client;
mod frame;
pub mod messages;
mod transport;

pub use client::{Client, SessionStats};
pub use frame::{Conn, Envelope, ProtoError, MAX_BLOB_BYTES, MAX_LINE_BYTES};
pub use transport::{connect, Endpoint};

/// Bumped on incompatible protocol changes; checked in `HELLO`.
pub const PROTOCOL_VERSION: u32 = 1;
