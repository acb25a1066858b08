//! Content hashing shared by the store, the engine drivers and the packager.
//!
//! Digests are lowercase hex SHA-256 over file bytes only, so a file's digest
//! never depends on its name, location or timestamps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// One entry of a digest tree.
///
/// Serialized as a bare string: the hex digest, `"deleted"` for a tombstone,
/// or `"error: <reason>"` for a file that could not be read.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum EntryDigest {
    Content(String),
    Deleted,
    Unreadable(String),
}

const TOMBSTONE: &str = "deleted";
const ERROR_PREFIX: &str = "error: ";

impl From<EntryDigest> for String {
    fn from(d: EntryDigest) -> String {
        match d {
            EntryDigest::Content(hex) => hex,
            EntryDigest::Deleted => TOMBSTONE.to_string(),
            EntryDigest::Unreadable(msg) => format!("{ERROR_PREFIX}{msg}"),
        }
    }
}

impl From<String> for EntryDigest {
    fn from(s: String) -> Self {
        if s == TOMBSTONE {
            EntryDigest::Deleted
        } else if let Some(msg) = s.strip_prefix(ERROR_PREFIX) {
            EntryDigest::Unreadable(msg.to_string())
        } else {
            EntryDigest::Content(s)
        }
    }
}

impl fmt::Display for EntryDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from(self.clone()))
    }
}

pub type DigestTree = BTreeMap<String, EntryDigest>;

/// Digest of every regular file below `root`, keyed by slash-separated
/// relative path. Unreadable files are kept as error-marked entries.
pub fn tree_digest(root: &Path) -> Result<DigestTree> {
    let mut out = DigestTree::new();
    if !root.is_dir() {
        return Err(Error::not_found(format!("directory {}", root.display())));
    }
    for entry in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(err) => {
                let rel = err
                    .path()
                    .and_then(|p| p.strip_prefix(root).ok())
                    .map(slash_path)
                    .unwrap_or_default();
                if !rel.is_empty() {
                    out.insert(rel, EntryDigest::Unreadable(err.to_string()));
                    continue;
                }
                return Err(Error::io(
                    root.display().to_string(),
                    io::Error::other(err.to_string()),
                ));
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = slash_path(entry.path().strip_prefix(root).expect("walk stays under root"));
        let digest = match file_sha256(entry.path()) {
            Ok(hex) => EntryDigest::Content(hex),
            Err(err) => EntryDigest::Unreadable(err.to_string()),
        };
        out.insert(rel, digest);
    }
    Ok(out)
}

/// Entries whose digest differs between two snapshots, including created
/// files and tombstones for deleted ones.
pub fn changed_entries(before: &DigestTree, after: &DigestTree) -> DigestTree {
    let mut changed = DigestTree::new();
    for (path, digest) in after {
        if before.get(path) != Some(digest) {
            changed.insert(path.clone(), digest.clone());
        }
    }
    for path in before.keys() {
        if !after.contains_key(path) {
            changed.insert(path.clone(), EntryDigest::Deleted);
        }
    }
    changed
}

pub(crate) fn slash_path(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}
