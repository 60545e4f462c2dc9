use std::fmt;

use serde::{Deserialize, Serialize};

/// Stable error codes shared by the controller, the wire protocol and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    SchemaInvalid,
    QuotaExceeded,
    Unsatisfiable,
    NotFound,
    StateConflict,
    BackendUnavailable,
    LogCorrupt,
    ProtocolError,
    SequenceGap,
    MissingObject,
    ProvisionFailed,
    IoError,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::SchemaInvalid => "SCHEMA_INVALID",
            ErrorCode::QuotaExceeded => "QUOTA_EXCEEDED",
            ErrorCode::Unsatisfiable => "UNSATISFIABLE",
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::StateConflict => "STATE_CONFLICT",
            ErrorCode::BackendUnavailable => "BACKEND_UNAVAILABLE",
            ErrorCode::LogCorrupt => "LOG_CORRUPT",
            ErrorCode::ProtocolError => "PROTOCOL_ERROR",
            ErrorCode::SequenceGap => "SEQUENCE_GAP",
            ErrorCode::MissingObject => "MISSING_OBJECT",
            ErrorCode::ProvisionFailed => "PROVISION_FAILED",
            ErrorCode::IoError => "IO_ERROR",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
