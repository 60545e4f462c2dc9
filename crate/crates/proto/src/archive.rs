//! Tar archives for `FETCH` replies.

use std::io;
use std::path::Path;

/// Pack `(path, bytes)` pairs into a tar archive. Paths are relative and
/// `/`-separated.
pub fn pack<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (path, bytes) in files {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, path, bytes)?;
    }
    builder.into_inner()
}

/// Read every entry as `(path, bytes)`.
pub fn entries(archive: &[u8]) -> io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut ar = tar::Archive::new(archive);
    for entry in ar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        io::Read::read_to_end(&mut entry, &mut bytes)?;
        out.push((path, bytes));
    }
    Ok(out)
}

/// Extract under `dest`, refusing entries that would escape it. Returns the
/// extracted relative paths.
pub fn unpack(archive: &[u8], dest: &Path) -> io::Result<Vec<String>> {
    std::fs::create_dir_all(dest)?;
    let mut names = Vec::new();
    let mut ar = tar::Archive::new(archive);
    for entry in ar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        if !entry.unpack_in(dest)? {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("archive entry `{path}` escapes destination")));
        }
        names.push(path);
    }
    Ok(names)
}
