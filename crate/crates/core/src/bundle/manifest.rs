use serde::{Deserialize, Serialize};

use crate::canonical::canonical_json;
use crate::digest::{Digest, ObjectId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryMode {
    File,
    Exec,
    Dir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ObjectId,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Normalized, `/`-separated, relative to the workspace root. `.` is the
    /// workspace root itself.
    pub path: String,
    pub mode: EntryMode,
    pub size_bytes: u64,
    pub chunks: Vec<Chunk>,
}

/// The manifest body that is hashed. `bundle_id` is derived from it, so it
/// is not part of the serialized text.
#[derive(Serialize, Deserialize)]
struct ManifestBody {
    spec_hash: Digest,
    entrypoint: String,
    entries: Vec<ManifestEntry>,
}

/// Content-addressed listing of an execution-ready bundle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleManifest {
    pub bundle_id: Digest,
    pub spec_hash: Digest,
    pub entries: Vec<ManifestEntry>,
    pub entrypoint: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest text is not in canonical form")]
    NotCanonical,
    #[error("manifest entry `{0}` is invalid: {1}")]
    BadEntry(String, &'static str),
}

impl BundleManifest {
    /// Build a manifest from entries, sorting them and deriving `bundle_id`.
    pub fn new(spec_hash: Digest, entrypoint: String, mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut m = BundleManifest { bundle_id: Digest([0; 32]), spec_hash, entries, entrypoint };
        m.bundle_id = Digest::of(m.canonical_text().as_bytes());
        m
    }

    /// Canonical JSON with a trailing LF. Byte-stable across platforms.
    pub fn canonical_text(&self) -> String {
        let body = ManifestBody {
            spec_hash: self.spec_hash,
            entrypoint: self.entrypoint.clone(),
            entries: self.entries.clone(),
        };
        let mut text = canonical_json(&body).expect("manifest serializes");
        text.push('\n');
        text
    }

    /// Parse canonical manifest text. Rejects anything that would not
    /// reproduce byte-for-byte, so the digest of the text is the bundle id.
    pub fn from_canonical_text(text: &str) -> Result<Self, ManifestError> {
        let body: ManifestBody = serde_json::from_str(text)?;
        for e in &body.entries {
            check_entry(e)?;
        }
        let m = BundleManifest::new(body.spec_hash, body.entrypoint, body.entries);
        if let Some(w) = m.entries.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(ManifestError::BadEntry(w[0].path.clone(), "duplicate path"));
        }
        if m.canonical_text() != text {
            return Err(ManifestError::NotCanonical);
        }
        Ok(m)
    }

    /// Distinct objects referenced, in first-appearance order.
    pub fn objects(&self) -> Vec<Chunk> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .flat_map(|e| e.chunks.iter())
            .filter(|c| seen.insert(c.id))
            .copied()
            .collect()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.size_bytes).sum()
    }
}

fn check_entry(e: &ManifestEntry) -> Result<(), ManifestError> {
    let bad = |why| Err(ManifestError::BadEntry(e.path.clone(), why));
    if e.path.is_empty() || e.path.starts_with('/') {
        return bad("path must be relative");
    }
    if e.path != "." && e.path.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
        return bad("path is not normalized");
    }
    match e.mode {
        EntryMode::Dir if e.size_bytes != 0 || !e.chunks.is_empty() => bad("directories carry no data"),
        EntryMode::File | EntryMode::Exec if e.chunks.iter().map(|c| c.size).sum::<u64>() != e.size_bytes => {
            bad("chunk sizes do not sum to the file size")
        }
        _ => Ok(()),
    }
}
