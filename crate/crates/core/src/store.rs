//! File-backed project store.
//!
//! Layout on disk:
//!
//! ```text
//! <store>/<project-id>/meta.json          project metadata and file tree
//! <store>/<project-id>/files/...          the experiment's canonical files
//! <store>/<project-id>/environment/       last generated Dockerfile and plan
//! <store>/<project-id>/images/<tag>.json  built images
//! <store>/<project-id>/runs/<run>.json    append-only run history
//! <store>/tags/<tag>                      store-wide tag id allocation
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::digest::{file_sha256, sha256_hex, slash_path};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectId(String);

impl ProjectId {
    pub fn new() -> Self {
        ProjectId(uuid::Uuid::new_v4().to_string())
    }

    /// Accepts only identifiers that are safe as a single directory name.
    pub fn parse(s: &str) -> Result<Self> {
        let ok = !s.is_empty()
            && s.len() <= 64
            && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(ProjectId(s.to_string()))
        } else {
            Err(Error::not_found(format!("project {s:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for ProjectId {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for ProjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProjectType {
    Script,
    ScriptWithDatabase,
    #[serde(rename = "ai")]
    AI,
}

impl std::str::FromStr for ProjectType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "script" => Ok(ProjectType::Script),
            "scriptwithdatabase" | "database" => Ok(ProjectType::ScriptWithDatabase),
            "ai" => Ok(ProjectType::AI),
            _ => Err(Error::validation(format!(
                "unknown project type {s:?} (script, script-with-database, ai)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum NodeKind {
    File,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileNode {
    pub path: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl FileNode {
    pub fn file(path: impl Into<String>, bytes: &[u8]) -> Self {
        FileNode {
            path: path.into(),
            kind: NodeKind::File,
            size: Some(bytes.len() as u64),
            digest: Some(sha256_hex(bytes)),
        }
    }

    pub fn folder(path: impl Into<String>) -> Self {
        FileNode {
            path: path.into(),
            kind: NodeKind::Folder,
            size: None,
            digest: None,
        }
    }

    pub fn is_file(&self) -> bool {
        self.kind == NodeKind::File
    }

    pub fn file_name(&self) -> &str {
        self.path.rsplit('/').next().unwrap_or(&self.path)
    }

    pub fn parent(&self) -> &str {
        self.path.rsplit_once('/').map(|(p, _)| p).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetRef {
    pub id: String,
    /// Relative path inside the project tree, or an absolute host path when
    /// `external` is set.
    pub root: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub external: bool,
}

impl DatasetRef {
    pub fn new(root: impl Into<String>, label: impl Into<String>) -> Self {
        DatasetRef {
            id: uuid::Uuid::new_v4().to_string(),
            root: root.into(),
            label: label.into(),
            external: false,
        }
    }

    pub fn external(root: impl Into<String>, label: impl Into<String>) -> Self {
        DatasetRef {
            external: true,
            ..DatasetRef::new(root, label)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedValue {
    Int(i64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeedDecl {
    pub location: String,
    pub variable: String,
    pub value: SeedValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Project {
    pub id: ProjectId,
    pub name: String,
    pub description: String,
    #[serde(rename = "type")]
    pub project_type: ProjectType,
    #[serde(default)]
    pub dataset: Option<DatasetRef>,
    #[serde(default)]
    pub dataset_history: Vec<DatasetRef>,
    #[serde(default)]
    pub seeds: Vec<SeedDecl>,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub files: Vec<FileNode>,
}

impl Project {
    pub fn node(&self, path: &str) -> Option<&FileNode> {
        self.files
            .binary_search_by(|n| n.path.as_str().cmp(path))
            .ok()
            .map(|i| &self.files[i])
    }

    /// Current dataset or one from history.
    pub fn dataset_by_id(&self, id: &str) -> Option<&DatasetRef> {
        self.dataset
            .iter()
            .chain(self.dataset_history.iter())
            .find(|d| d.id == id)
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    ZipArchive(PathBuf),
    ZipBytes(Vec<u8>),
    LocalDir(PathBuf),
    GitUrl(String),
    DoiUrl(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryAction {
    CreateFile(Vec<u8>),
    CreateFolder,
    EditFile(Vec<u8>),
    Delete,
}

/// Normalize a user-supplied relative path to slash-separated form.
///
/// `.` and empty segments are dropped; `..`, absolute paths and drive
/// prefixes are rejected.
pub fn normalize_rel_path(input: &str) -> Result<String> {
    if input.contains('\0') {
        return Err(Error::validation("path contains NUL"));
    }
    let unified = input.replace('\\', "/");
    if unified.starts_with('/') {
        return Err(Error::PathTraversal(format!("absolute path {input:?}")));
    }
    let mut parts = Vec::new();
    for seg in unified.split('/') {
        match seg {
            "" | "." => {}
            ".." => return Err(Error::PathTraversal(input.to_string())),
            s => {
                if parts.is_empty() && s.len() == 2 && s.ends_with(':') {
                    return Err(Error::PathTraversal(format!("drive path {input:?}")));
                }
                parts.push(s);
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::validation(format!("empty path {input:?}")));
    }
    Ok(parts.join("/"))
}

const REMOTE_LIMIT: u64 = 2 * 1024 * 1024 * 1024;

pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<ProjectId, Arc<Mutex<()>>>>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("tags")).map_err(Error::at_path(&root))?;
        Ok(Store {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, id: &ProjectId) -> PathBuf {
        self.root.join(id.as_str())
    }

    pub fn files_root(&self, id: &ProjectId) -> PathBuf {
        self.project_dir(id).join("files")
    }

    /// Lock held for the duration of any mutation of one project.
    pub fn project_lock(&self, id: &ProjectId) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.clone()).or_default().clone()
    }

    pub fn create_project(
        &self,
        name: &str,
        description: &str,
        project_type: ProjectType,
    ) -> Result<Project> {
        if name.trim().is_empty() {
            return Err(Error::validation("project name must not be empty"));
        }
        let project = Project {
            id: ProjectId::new(),
            name: name.to_string(),
            description: description.to_string(),
            project_type,
            dataset: None,
            dataset_history: Vec::new(),
            seeds: Vec::new(),
            created_at: Utc::now(),
            files: Vec::new(),
        };
        let dir = self.project_dir(&project.id);
        // create_dir (not _all) fails if the id were ever reused
        fs::create_dir(&dir).map_err(Error::at_path(&dir))?;
        fs::create_dir(dir.join("files")).map_err(Error::at_path(&dir))?;
        fs::write(dir.join(".dockerignore"), "*\n!files\n").map_err(Error::at_path(&dir))?;
        self.write_meta(&project)?;
        Ok(project)
    }

    pub fn project(&self, id: &ProjectId) -> Result<Project> {
        let path = self.project_dir(id).join("meta.json");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::not_found(format!("project {id}")))
            }
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        };
        serde_json::from_slice(&bytes).map_err(|source| Error::Metadata {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn list_projects(&self) -> Result<Vec<Project>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(Error::at_path(&self.root))? {
            let entry = entry.map_err(Error::at_path(&self.root))?;
            if entry.path().join("meta.json").is_file() {
                if let Ok(id) = ProjectId::parse(&entry.file_name().to_string_lossy()) {
                    out.push(self.project(&id)?);
                }
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Serialized metadata exactly as `meta.json` stores it.
    pub fn meta_bytes(project: &Project) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(project).expect("project serializes");
        bytes.push(b'\n');
        bytes
    }

    fn write_meta(&self, project: &Project) -> Result<()> {
        let dir = self.project_dir(&project.id);
        atomic_write(&dir.join("meta.json"), &Self::meta_bytes(project))
    }

    /// Ingest files into the project tree. Returns the nodes that came from
    /// the source; existing files at the same paths are overwritten.
    pub fn ingest(&self, id: &ProjectId, source: Source) -> Result<Vec<FileNode>> {
        let lock = self.project_lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut project = self.project(id)?;
        let files_root = self.files_root(id);

        let staging = tempfile::tempdir_in(self.project_dir(id)).map_err(Error::at_path(&files_root))?;
        match source {
            Source::ZipArchive(path) => {
                let bytes = fs::read(&path).map_err(|e| {
                    Error::validation(format!("cannot read archive {}: {e}", path.display()))
                })?;
                extract_zip(&bytes, staging.path())?;
            }
            Source::ZipBytes(bytes) => extract_zip(&bytes, staging.path())?,
            Source::LocalDir(dir) => copy_tree(&dir, staging.path(), false)?,
            Source::GitUrl(url) => clone_git(&url, staging.path())?,
            Source::DoiUrl(url) => fetch_remote(&url, staging.path())?,
        }
        let incoming = scan_tree(staging.path())?;
        copy_tree(staging.path(), &files_root, false)?;
        project.files = scan_tree(&files_root)?;
        self.write_meta(&project)?;
        Ok(incoming)
    }

    pub fn modify_entry(
        &self,
        id: &ProjectId,
        path: &str,
        action: EntryAction,
    ) -> Result<Option<FileNode>> {
        let path = normalize_rel_path(path)?;
        let lock = self.project_lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut project = self.project(id)?;
        let target = self.files_root(id).join(&path);
        let existing = project.node(&path).cloned();

        match &action {
            EntryAction::CreateFile(bytes) => {
                if existing.is_some() {
                    return Err(Error::AlreadyExists(path));
                }
                self.ensure_parent_folders(&project, &path)?;
                write_new(&target, bytes)?;
            }
            EntryAction::CreateFolder => {
                if existing.is_some() {
                    return Err(Error::AlreadyExists(path));
                }
                self.ensure_parent_folders(&project, &path)?;
                fs::create_dir_all(&target).map_err(Error::at_path(&target))?;
            }
            EntryAction::EditFile(bytes) => match &existing {
                None => return Err(Error::not_found(format!("file {path}"))),
                Some(node) if !node.is_file() => {
                    return Err(Error::validation(format!("{path} is a folder, not a file")))
                }
                Some(_) => atomic_write(&target, bytes)?,
            },
            EntryAction::Delete => match &existing {
                None => return Err(Error::not_found(format!("entry {path}"))),
                Some(node) if node.is_file() => {
                    fs::remove_file(&target).map_err(Error::at_path(&target))?
                }
                Some(_) => fs::remove_dir_all(&target).map_err(Error::at_path(&target))?,
            },
        }

        project.files = scan_tree(&self.files_root(id))?;
        self.write_meta(&project)?;
        Ok(match action {
            EntryAction::Delete => None,
            _ => project.node(&path).cloned(),
        })
    }

    fn ensure_parent_folders(&self, project: &Project, path: &str) -> Result<()> {
        let mut prefix = String::new();
        let segments: Vec<&str> = path.split('/').collect();
        for seg in &segments[..segments.len() - 1] {
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(seg);
            if let Some(node) = project.node(&prefix) {
                if node.is_file() {
                    return Err(Error::validation(format!("{prefix} is a file, not a folder")));
                }
            }
        }
        if let Some(parent) = self.files_root(&project.id).join(path).parent() {
            fs::create_dir_all(parent).map_err(Error::at_path(parent))?;
        }
        Ok(())
    }

    pub fn set_dataset(&self, id: &ProjectId, mut dataset: DatasetRef) -> Result<Project> {
        let lock = self.project_lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut project = self.project(id)?;
        if dataset.id.trim().is_empty() {
            dataset.id = uuid::Uuid::new_v4().to_string();
        }
        if dataset.external {
            let host = Path::new(&dataset.root);
            if !host.is_absolute() || !host.exists() {
                return Err(Error::not_found(format!("external dataset root {}", dataset.root)));
            }
        } else {
            dataset.root = normalize_rel_path(&dataset.root)?;
            if project.node(&dataset.root).is_none() {
                return Err(Error::not_found(format!("dataset root {}", dataset.root)));
            }
        }
        if let Some(previous) = project.dataset.take() {
            if previous.id != dataset.id && project.dataset_by_id(&previous.id).is_none() {
                project.dataset_history.push(previous);
            }
        }
        project.dataset_history.retain(|d| d.id != dataset.id);
        project.dataset = Some(dataset);
        self.write_meta(&project)?;
        Ok(project)
    }

    pub fn declare_seeds(&self, id: &ProjectId, seeds: Vec<SeedDecl>) -> Result<Project> {
        let lock = self.project_lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut project = self.project(id)?;
        let mut normalized = Vec::with_capacity(seeds.len());
        for mut seed in seeds {
            seed.location = normalize_rel_path(&seed.location)?;
            match project.node(&seed.location) {
                Some(n) if n.is_file() => {}
                _ => {
                    return Err(Error::not_found(format!(
                        "seed location {} (must be a file)",
                        seed.location
                    )))
                }
            }
            if seed.variable.trim().is_empty() {
                return Err(Error::validation("seed variable must not be empty"));
            }
            normalized.push(seed);
        }
        project.seeds = normalized;
        self.write_meta(&project)?;
        Ok(project)
    }

    /// Allocate a store-wide integer tag id owned by `owner`.
    pub fn allocate_tag(&self, owner: &ProjectId) -> Result<u64> {
        let dir = self.root.join("tags");
        let mut next = fs::read_dir(&dir)
            .map_err(Error::at_path(&dir))?
            .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        loop {
            let path = dir.join(next.to_string());
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(owner.as_str().as_bytes())
                        .map_err(Error::at_path(&path))?;
                    return Ok(next);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
                Err(e) => return Err(Error::io(path.display().to_string(), e)),
            }
        }
    }

    pub fn tag_owner(&self, tag: u64) -> Result<ProjectId> {
        let path = self.root.join("tags").join(tag.to_string());
        match fs::read_to_string(&path) {
            Ok(owner) => ProjectId::parse(owner.trim()),
            Err(_) => Err(Error::not_found(format!("image with tagId {tag}"))),
        }
    }

    /// Persist a JSON record under `<project>/<kind>/<key>.json`.
    /// With `create_new`, an existing record is never overwritten.
    pub fn put_record<T: Serialize>(
        &self,
        id: &ProjectId,
        kind: &str,
        key: &str,
        value: &T,
        create_new: bool,
    ) -> Result<()> {
        let dir = self.project_dir(id).join(kind);
        fs::create_dir_all(&dir).map_err(Error::at_path(&dir))?;
        let path = dir.join(format!("{key}.json"));
        let mut bytes = serde_json::to_vec_pretty(value).expect("record serializes");
        bytes.push(b'\n');
        if create_new {
            write_new(&path, &bytes)
        } else {
            atomic_write(&path, &bytes)
        }
    }

    pub fn get_record<T: DeserializeOwned>(&self, id: &ProjectId, kind: &str, key: &str) -> Result<Option<T>> {
        let path = self.project_dir(id).join(kind).join(format!("{key}.json"));
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|source| Error::Metadata {
                context: path.display().to_string(),
                source,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }

    pub fn list_records<T: DeserializeOwned>(&self, id: &ProjectId, kind: &str) -> Result<Vec<T>> {
        let dir = self.project_dir(id).join(kind);
        let mut keys = Vec::new();
        match fs::read_dir(&dir) {
            Ok(entries) => {
                for entry in entries.flatten() {
                    let name = entry.file_name().to_string_lossy().to_string();
                    if let Some(key) = name.strip_suffix(".json") {
                        keys.push(key.to_string());
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(dir.display().to_string(), e)),
        }
        keys.sort();
        let mut out = Vec::with_capacity(keys.len());
        for key in keys {
            if let Some(v) = self.get_record(id, kind, &key)? {
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// All files and folders below `root`, sorted by path. Symlinks are skipped.
pub fn scan_tree(root: &Path) -> Result<Vec<FileNode>> {
    let mut nodes = Vec::new();
    for entry in WalkDir::new(root).min_depth(1).follow_links(false) {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e.into()))?;
        let rel = slash_path(entry.path().strip_prefix(root).expect("under root"));
        let ft = entry.file_type();
        if ft.is_dir() {
            nodes.push(FileNode::folder(rel));
        } else if ft.is_file() {
            let size = entry.metadata().map(|m| m.len()).ok();
            let digest = file_sha256(entry.path()).map_err(Error::at_path(entry.path()))?;
            nodes.push(FileNode {
                path: rel,
                kind: NodeKind::File,
                size,
                digest: Some(digest),
            });
        }
    }
    nodes.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(nodes)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(Error::at_path(parent))?;
    tmp.write_all(bytes).map_err(Error::at_path(path))?;
    tmp.persist(path).map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::AlreadyExists(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
    f.write_all(bytes).map_err(Error::at_path(path))
}

/// Recursively copy `src` into `dst`, overwriting files. Symlinks are
/// skipped; `.git` directories are skipped when `skip_git` is set.
pub(crate) fn copy_tree(src: &Path, dst: &Path, skip_git: bool) -> Result<()> {
    if !src.is_dir() {
        return Err(Error::validation(format!("{} is not a readable directory", src.display())));
    }
    fs::create_dir_all(dst).map_err(Error::at_path(dst))?;
    let walker = WalkDir::new(src)
        .min_depth(1)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(skip_git && e.file_type().is_dir() && e.file_name() == ".git"));
    for entry in walker {
        let entry = entry.map_err(|e| Error::io(src.display().to_string(), e.into()))?;
        let rel = entry.path().strip_prefix(src).expect("under src");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            if target.is_file() {
                fs::remove_file(&target).map_err(Error::at_path(&target))?;
            }
            fs::create_dir_all(&target).map_err(Error::at_path(&target))?;
        } else if entry.file_type().is_file() {
            if target.is_dir() {
                fs::remove_dir_all(&target).map_err(Error::at_path(&target))?;
            }
            fs::copy(entry.path(), &target).map_err(Error::at_path(entry.path()))?;
        } else {
            log::warn!("skipping non-regular entry {}", entry.path().display());
        }
    }
    Ok(())
}

/// Extract a zip archive. Every entry is validated before anything is
/// written, so a rejected archive leaves no partial output.
pub(crate) fn extract_zip(bytes: &[u8], dst: &Path) -> Result<()> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| Error::validation(format!("unreadable zip archive: {e}")))?;
    let mut plan = Vec::with_capacity(archive.len());
    for i in 0..archive.len() {
        let entry = archive
            .by_index(i)
            .map_err(|e| Error::validation(format!("unreadable zip entry {i}: {e}")))?;
        let raw = entry
            .name()
            .map_err(|e| Error::validation(format!("bad zip entry name: {e}")))?
            .to_string();
        if entry.is_symlink()
            || entry.unix_mode().is_some_and(|m| m & 0o170000 == 0o120000)
        {
            return Err(Error::PathTraversal(format!("symlink entry {raw:?}")));
        }
        let rel = normalize_rel_path(&raw)?;
        plan.push((i, rel, entry.is_dir()));
    }
    for (i, rel, is_dir) in plan {
        let target = dst.join(&rel);
        if is_dir {
            fs::create_dir_all(&target).map_err(Error::at_path(&target))?;
            continue;
        }
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(Error::at_path(parent))?;
        }
        let mut entry = archive
            .by_index(i)
            .map_err(|e| Error::validation(format!("unreadable zip entry {rel}: {e}")))?;
        let mut out = fs::File::create(&target).map_err(Error::at_path(&target))?;
        std::io::copy(&mut entry, &mut out)
            .map_err(|e| Error::validation(format!("corrupt zip entry {rel}: {e}")))?;
    }
    Ok(())
}

fn clone_git(url: &str, dst: &Path) -> Result<()> {
    let checkout = dst.with_extension("git-checkout");
    let output = Command::new("git")
        .args(["clone", "--depth", "1", "--quiet", "--", url])
        .arg(&checkout)
        .env("GIT_TERMINAL_PROMPT", "0")
        .output()
        .map_err(|e| Error::Remote(format!("cannot run git: {e}")))?;
    if !output.status.success() {
        let _ = fs::remove_dir_all(&checkout);
        return Err(Error::Remote(format!(
            "git clone {url} failed: {}",
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let copied = copy_tree(&checkout, dst, true);
    let _ = fs::remove_dir_all(&checkout);
    copied
}

/// Resolve a DOI or direct URL to a file. Zip payloads are extracted; any
/// other payload is stored as one file named after the last URL segment.
/// HTML landing pages are refused.
fn fetch_remote(location: &str, dst: &Path) -> Result<()> {
    let url = doi_to_url(location);
    let mut response = ureq::get(&url)
        .call()
        .map_err(|e| Error::Remote(format!("{url}: {e}")))?;
    let final_uri = ureq::ResponseExt::get_uri(&response).to_string();
    let content_type = response
        .headers()
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    let body = response
        .body_mut()
        .with_config()
        .limit(REMOTE_LIMIT)
        .read_to_vec()
        .map_err(|e| Error::Remote(format!("{url}: {e}")))?;

    let head = String::from_utf8_lossy(&body[..body.len().min(256)]).to_ascii_lowercase();
    if content_type.starts_with("text/html")
        || head.trim_start().starts_with("<!doctype html")
        || head.trim_start().starts_with("<html")
    {
        return Err(Error::NotSupported(format!(
            "{url} resolved to an HTML landing page; provide a direct file URL"
        )));
    }
    if body.starts_with(b"PK\x03\x04") {
        return extract_zip(&body, dst);
    }
    let name = final_uri
        .split(['?', '#'])
        .next()
        .and_then(|u| u.rsplit('/').next())
        .filter(|s| !s.is_empty())
        .and_then(|s| normalize_rel_path(s).ok())
        .unwrap_or_else(|| "download".to_string());
    let target = dst.join(name);
    let mut f = fs::File::create(&target).map_err(Error::at_path(&target))?;
    f.write_all(&body).map_err(Error::at_path(&target))
}

fn doi_to_url(location: &str) -> String {
    let trimmed = location.trim();
    if let Some(doi) = trimmed.strip_prefix("doi:") {
        format!("https://doi.org/{}", doi.trim())
    } else if trimmed.starts_with("10.") {
        format!("https://doi.org/{trimmed}")
    } else {
        trimmed.to_string()
    }
}
