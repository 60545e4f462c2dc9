//! Content-addressed object stores.
//!
//! On disk, objects live at `objects/<first 2 hex>/<remaining hex>` and
//! manifests at `manifests/<hex>.json`. Writes go to `tmp/` first and are
//! renamed into place, so a reader never observes a partial object.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use super::manifest::BundleManifest;
use crate::digest::{Digest, ObjectId};

/// Storage for bundle objects and manifests, keyed by digest.
pub trait ObjectStore: Send + Sync {
    /// Store `bytes` and return their digest. Storing existing content is a no-op.
    fn put_object(&self, bytes: &[u8]) -> io::Result<ObjectId>;
    fn get_object(&self, id: &ObjectId) -> io::Result<Option<Vec<u8>>>;
    fn has_object(&self, id: &ObjectId) -> bool;
    /// Every stored object with its size in bytes.
    fn objects(&self) -> io::Result<Vec<(ObjectId, u64)>>;
    /// Returns the bytes freed (0 if absent).
    fn remove_object(&self, id: &ObjectId) -> io::Result<u64>;

    fn put_manifest(&self, manifest: &BundleManifest) -> io::Result<()>;
    fn get_manifest(&self, id: &Digest) -> io::Result<Option<BundleManifest>>;
    fn has_manifest(&self, id: &Digest) -> bool;
    fn manifests(&self) -> io::Result<Vec<(Digest, u64)>>;
    fn remove_manifest(&self, id: &Digest) -> io::Result<u64>;

    /// Total stored bytes, objects plus manifests.
    fn payload_bytes(&self) -> io::Result<u64> {
        let objects: u64 = self.objects()?.iter().map(|(_, s)| s).sum();
        let manifests: u64 = self.manifests()?.iter().map(|(_, s)| s).sum();
        Ok(objects + manifests)
    }
}

/// Directory-backed store.
#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["objects", "manifests", "tmp"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(DirStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, id: &ObjectId) -> PathBuf {
        let hex = id.to_hex();
        self.root.join("objects").join(&hex[..2]).join(&hex[2..])
    }

    pub fn manifest_path(&self, id: &Digest) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", id.to_hex()))
    }

    fn write_atomic(&self, dest: &Path, bytes: &[u8]) -> io::Result<()> {
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = self.root.join("tmp").join(format!(
            "{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, dest)
    }

    fn file_len(path: &Path) -> io::Result<u64> {
        match fs::metadata(path) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e),
        }
    }

    fn remove_file(path: &Path) -> io::Result<u64> {
        let len = Self::file_len(path)?;
        match fs::remove_file(path) {
            Ok(()) => Ok(len),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e),
        }
    }
}

impl ObjectStore for DirStore {
    fn put_object(&self, bytes: &[u8]) -> io::Result<ObjectId> {
        let id = Digest::of(bytes);
        let path = self.object_path(&id);
        if !path.exists() {
            self.write_atomic(&path, bytes)?;
        }
        Ok(id)
    }

    fn get_object(&self, id: &ObjectId) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.object_path(id)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn has_object(&self, id: &ObjectId) -> bool {
        self.object_path(id).is_file()
    }

    fn objects(&self) -> io::Result<Vec<(ObjectId, u64)>> {
        let mut out = Vec::new();
        for fan in fs::read_dir(self.root.join("objects"))? {
            let fan = fan?;
            if !fan.file_type()?.is_dir() {
                continue;
            }
            let prefix = fan.file_name().to_string_lossy().into_owned();
            for obj in fs::read_dir(fan.path())? {
                let obj = obj?;
                let name = format!("{prefix}{}", obj.file_name().to_string_lossy());
                if let Ok(id) = name.parse::<Digest>() {
                    out.push((id, obj.metadata()?.len()));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn remove_object(&self, id: &ObjectId) -> io::Result<u64> {
        Self::remove_file(&self.object_path(id))
    }

    fn put_manifest(&self, manifest: &BundleManifest) -> io::Result<()> {
        let path = self.manifest_path(&manifest.bundle_id);
        if !path.exists() {
            self.write_atomic(&path, manifest.canonical_text().as_bytes())?;
        }
        Ok(())
    }

    fn get_manifest(&self, id: &Digest) -> io::Result<Option<BundleManifest>> {
        let text = match fs::read_to_string(self.manifest_path(id)) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        BundleManifest::from_canonical_text(&text)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
    }

    fn has_manifest(&self, id: &Digest) -> bool {
        self.manifest_path(id).is_file()
    }

    fn manifests(&self) -> io::Result<Vec<(Digest, u64)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("manifests"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(hex) = name.strip_suffix(".json") {
                if let Ok(id) = hex.parse::<Digest>() {
                    out.push((id, entry.metadata()?.len()));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn remove_manifest(&self, id: &Digest) -> io::Result<u64> {
        Self::remove_file(&self.manifest_path(id))
    }
}

/// In-memory store, used by the client to build bundles without leaving
/// local state behind.
#[derive(Debug, Default)]
pub struct MemStore {
    objects: RwLock<HashMap<ObjectId, Vec<u8>>>,
    manifests: RwLock<HashMap<Digest, String>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ObjectStore for MemStore {
    fn put_object(&self, bytes: &[u8]) -> io::Result<ObjectId> {
        let id = Digest::of(bytes);
        self.objects.write().unwrap().entry(id).or_insert_with(|| bytes.to_vec());
        Ok(id)
    }

    fn get_object(&self, id: &ObjectId) -> io::Result<Option<Vec<u8>>> {
        Ok(self.objects.read().unwrap().get(id).cloned())
    }

    fn has_object(&self, id: &ObjectId) -> bool {
        self.objects.read().unwrap().contains_key(id)
    }

    fn objects(&self) -> io::Result<Vec<(ObjectId, u64)>> {
        let mut out: Vec<_> =
            self.objects.read().unwrap().iter().map(|(k, v)| (*k, v.len() as u64)).collect();
        out.sort();
        Ok(out)
    }

    fn remove_object(&self, id: &ObjectId) -> io::Result<u64> {
        Ok(self.objects.write().unwrap().remove(id).map_or(0, |v| v.len() as u64))
    }

    fn put_manifest(&self, manifest: &BundleManifest) -> io::Result<()> {
        self.manifests
            .write()
            .unwrap()
            .entry(manifest.bundle_id)
            .or_insert_with(|| manifest.canonical_text());
        Ok(())
    }

    fn get_manifest(&self, id: &Digest) -> io::Result<Option<BundleManifest>> {
        match self.manifests.read().unwrap().get(id) {
            None => Ok(None),
            Some(text) => BundleManifest::from_canonical_text(text)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
        }
    }

    fn has_manifest(&self, id: &Digest) -> bool {
        self.manifests.read().unwrap().contains_key(id)
    }

    fn manifests(&self) -> io::Result<Vec<(Digest, u64)>> {
        let mut out: Vec<_> =
            self.manifests.read().unwrap().iter().map(|(k, v)| (*k, v.len() as u64)).collect();
        out.sort();
        Ok(out)
    }

    fn remove_manifest(&self, id: &Digest) -> io::Result<u64> {
        Ok(self.manifests.write().unwrap().remove(id).map_or(0, |v| v.len() as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_store_layout_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirStore::open(dir.path()).unwrap();
        let id = store.put_object(b"hello").unwrap();
        let again = store.put_object(b"hello").unwrap();
        assert_eq!(id, again);
        let hex = id.to_hex();
        assert!(dir.path().join("objects").join(&hex[..2]).join(&hex[2..]).is_file());
        assert_eq!(store.objects().unwrap(), vec![(id, 5)]);
        assert_eq!(store.get_object(&id).unwrap().unwrap(), b"hello");
        assert_eq!(store.remove_object(&id).unwrap(), 5);
        assert_eq!(store.remove_object(&id).unwrap(), 0);
        assert!(!store.has_object(&id));
        // Nothing left behind in tmp/.
        assert_eq!(fs::read_dir(dir.path().join("tmp")).unwrap().count(), 0);
    }

    #[test]
    fn mem_store_dedups() {
        let store = MemStore::new();
        store.put_object(b"a").unwrap();
        store.put_object(b"a").unwrap();
        store.put_object(b"b").unwrap();
        assert_eq!(store.objects().unwrap().len(), 2);
        assert_eq!(store.payload_bytes().unwrap(), 2);
    }
}
