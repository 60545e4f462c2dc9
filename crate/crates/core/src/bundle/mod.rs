//! Compiler layer: turn a task spec plus its workspace into a self-contained,
//! content-addressed bundle.
//!
//! Files are addressed by content. Files larger than the chunk size (4 MiB by
//! default) are split into fixed-size chunks so a large dataset shared by
//! many submissions is stored, and uploaded, once. [`plan_upload`] computes
//! the delta against a remote inventory.

mod manifest;
mod store;

pub use manifest::{BundleManifest, Chunk, EntryMode, ManifestEntry, ManifestError};
pub use store::{DirStore, MemStore, ObjectStore};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use crate::digest::{Digest, ObjectId};
use crate::error::ErrorCode;
use crate::schema::{canonicalize, TaskSpec};

pub const DEFAULT_CHUNK_SIZE: u64 = 4 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    pub chunk_size: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { chunk_size: DEFAULT_CHUNK_SIZE }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("IO_ERROR at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("SCHEMA_INVALID: path `{0}` escapes the workspace")]
    PathEscape(String),
    #[error("SCHEMA_INVALID: symlink `{0}` is not allowed in a bundle")]
    Symlink(String),
    #[error("SCHEMA_INVALID: `{0}` is neither a file nor a directory")]
    UnsupportedFileType(String),
    #[error("MISSING_OBJECT {0}")]
    MissingObject(ObjectId),
    #[error("IO_ERROR: target {0} is not empty")]
    TargetNotEmpty(PathBuf),
}

impl BundleError {
    pub fn code(&self) -> ErrorCode {
        match self {
            BundleError::Io { .. } | BundleError::TargetNotEmpty(_) => ErrorCode::IoError,
            BundleError::PathEscape(_) | BundleError::Symlink(_) | BundleError::UnsupportedFileType(_) => {
                ErrorCode::SchemaInvalid
            }
            BundleError::MissingObject(_) => ErrorCode::MissingObject,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

/// Normalize a workspace-relative path to `/`-separated components, `.` for
/// the root. Rejects absolute paths and `..`.
pub fn normalize_rel_path(path: &str) -> Result<String, BundleError> {
    if path.starts_with('/') {
        return Err(BundleError::PathEscape(path.to_string()));
    }
    let mut parts = Vec::new();
    for comp in path.split('/') {
        match comp {
            "" | "." => {}
            ".." => return Err(BundleError::PathEscape(path.to_string())),
            c => parts.push(c),
        }
    }
    Ok(if parts.is_empty() { ".".to_string() } else { parts.join("/") })
}

fn join_rel(base: &str, child: &str) -> String {
    if base == "." {
        child.to_string()
    } else {
        format!("{base}/{child}")
    }
}

fn rel_to_fs(root: &Path, rel: &str) -> PathBuf {
    if rel == "." {
        root.to_path_buf()
    } else {
        root.join(rel)
    }
}

/// Store every file under the spec's code root and datasets, and return the
/// manifest. Two builds of an unchanged workspace produce the same bundle id
/// regardless of timestamps.
pub fn build_bundle(
    spec: &TaskSpec,
    workspace_root: &Path,
    store: &dyn ObjectStore,
    opts: BuildOptions,
) -> Result<BundleManifest, BundleError> {
    assert!(opts.chunk_size > 0, "chunk size must be positive");
    let mut roots = vec![normalize_rel_path(&spec.code_root)?];
    for d in &spec.datasets {
        // URIs name external data and are not bundled.
        if !d.contains("://") {
            roots.push(normalize_rel_path(d)?);
        }
    }

    let mut entries: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    for root in roots {
        if entries.contains_key(&root) {
            continue;
        }
        let fs_root = rel_to_fs(workspace_root, &root);
        add_path(&fs_root, &root, store, opts, &mut entries)?;
        let meta = fs::symlink_metadata(&fs_root).map_err(io_err(&fs_root))?;
        if meta.is_dir() {
            let walker = walkdir::WalkDir::new(&fs_root).min_depth(1).follow_links(false).sort_by_file_name();
            for item in walker {
                let item = item.map_err(|e| {
                    let path = e.path().unwrap_or(&fs_root).to_path_buf();
                    BundleError::Io { path, source: e.into() }
                })?;
                let rel_child = item
                    .path()
                    .strip_prefix(&fs_root)
                    .expect("walkdir yields children of its root")
                    .to_str()
                    .ok_or_else(|| BundleError::UnsupportedFileType(item.path().display().to_string()))?
                    .to_string();
                let rel = join_rel(&root, &rel_child);
                if !entries.contains_key(&rel) {
                    add_path(item.path(), &rel, store, opts, &mut entries)?;
                }
            }
        }
    }

    let spec_hash = canonicalize(spec).spec_hash;
    let manifest = BundleManifest::new(spec_hash, spec.entrypoint.clone(), entries.into_values().collect());
    store.put_manifest(&manifest).map_err(io_err(Path::new("manifests")))?;
    Ok(manifest)
}

fn add_path(
    path: &Path,
    rel: &str,
    store: &dyn ObjectStore,
    opts: BuildOptions,
    entries: &mut BTreeMap<String, ManifestEntry>,
) -> Result<(), BundleError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    let ft = meta.file_type();
    let entry = if ft.is_symlink() {
        return Err(BundleError::Symlink(rel.to_string()));
    } else if ft.is_dir() {
        ManifestEntry { path: rel.to_string(), mode: EntryMode::Dir, size_bytes: 0, chunks: Vec::new() }
    } else if ft.is_file() {
        let mode = if meta.permissions().mode() & 0o111 != 0 { EntryMode::Exec } else { EntryMode::File };
        let chunks = store_file(path, store, opts.chunk_size)?;
        let size_bytes = chunks.iter().map(|c| c.size).sum();
        ManifestEntry { path: rel.to_string(), mode, size_bytes, chunks }
    } else {
        return Err(BundleError::UnsupportedFileType(rel.to_string()));
    };
    entries.insert(rel.to_string(), entry);
    Ok(())
}

/// Files up to `chunk_size` are one object; larger files are split into
/// `chunk_size` pieces with a shorter tail. Empty files have no chunks.
fn store_file(path: &Path, store: &dyn ObjectStore, chunk_size: u64) -> Result<Vec<Chunk>, BundleError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut chunks = Vec::new();
    let mut buf = Vec::with_capacity(chunk_size.min(DEFAULT_CHUNK_SIZE) as usize);
    loop {
        buf.clear();
        let n = (&mut file).take(chunk_size).read_to_end(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        let id = store.put_object(&buf).map_err(io_err(path))?;
        chunks.push(Chunk { id, size: n as u64 });
        if (n as u64) < chunk_size {
            break;
        }
    }
    Ok(chunks)
}

/// Objects the remote side lacks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadPlan {
    pub missing_objects: Vec<(ObjectId, u64)>,
    pub manifest_required: bool,
    pub total_bytes: u64,
}

/// `remote_index` holds object ids and the ids of manifests the remote side
/// already stores.
pub fn plan_upload(manifest: &BundleManifest, remote_index: &HashSet<Digest>) -> UploadPlan {
    let missing_objects: Vec<(ObjectId, u64)> = manifest
        .objects()
        .into_iter()
        .filter(|c| !remote_index.contains(&c.id))
        .map(|c| (c.id, c.size))
        .collect();
    let total_bytes = missing_objects.iter().map(|(_, s)| s).sum();
    UploadPlan { missing_objects, manifest_required: !remote_index.contains(&manifest.bundle_id), total_bytes }
}

/// Recreate the bundle's tree under `target`, which must be empty or absent.
/// Every referenced object is checked before anything is written.
pub fn materialize(manifest: &BundleManifest, store: &dyn ObjectStore, target: &Path) -> Result<(), BundleError> {
    if target.exists() {
        let mut dir = fs::read_dir(target).map_err(io_err(target))?;
        if dir.next().is_some() {
            return Err(BundleError::TargetNotEmpty(target.to_path_buf()));
        }
    } else {
        fs::create_dir_all(target).map_err(io_err(target))?;
    }
    if let Some(missing) = manifest.objects().into_iter().find(|c| !store.has_object(&c.id)) {
        return Err(BundleError::MissingObject(missing.id));
    }

    for entry in &manifest.entries {
        if normalize_rel_path(&entry.path)? != entry.path {
            return Err(BundleError::PathEscape(entry.path.clone()));
        }
        let dest = rel_to_fs(target, &entry.path);
        match entry.mode {
            EntryMode::Dir => fs::create_dir_all(&dest).map_err(io_err(&dest))?,
            EntryMode::File | EntryMode::Exec => {
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                let mut out = fs::File::create(&dest).map_err(io_err(&dest))?;
                for chunk in &entry.chunks {
                    let bytes = store
                        .get_object(&chunk.id)
                        .map_err(io_err(&dest))?
                        .ok_or(BundleError::MissingObject(chunk.id))?;
                    io::Write::write_all(&mut out, &bytes).map_err(io_err(&dest))?;
                }
                let mode = if entry.mode == EntryMode::Exec { 0o755 } else { 0o644 };
                fs::set_permissions(&dest, fs::Permissions::from_mode(mode)).map_err(io_err(&dest))?;
            }
        }
    }
    Ok(())
}

/// Remove every object and manifest not reachable from `live`. Returns the
/// bytes freed.
pub fn gc(store: &dyn ObjectStore, live: &[BundleManifest]) -> io::Result<u64> {
    let live_manifests: HashSet<Digest> = live.iter().map(|m| m.bundle_id).collect();
    let live_objects: HashSet<ObjectId> = live.iter().flat_map(|m| m.objects()).map(|c| c.id).collect();
    let mut reclaimed = 0;
    for (id, _) in store.manifests()? {
        if !live_manifests.contains(&id) {
            reclaimed += store.remove_manifest(&id)?;
        }
    }
    for (id, _) in store.objects()? {
        if !live_objects.contains(&id) {
            reclaimed += store.remove_object(&id)?;
        }
    }
    Ok(reclaimed)
}
