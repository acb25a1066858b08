//! Self-contained experiment packages.
//!
//! Layout of a package directory:
//!
//! ```text
//! manifest.json           PackageManifest, including a digest of every other file
//! environment/Dockerfile  the container spec
//! files/...               the experiment tree
//! runExperiment.sh        Unix and macOS entry point
//! runExperiment.bat       Windows entry point
//! image.tar               optional exported image
//! ```
//!
//! Both scripts are rendered from one list of engine invocations, so they
//! issue the same engine commands. Running a script writes to `results/`,
//! which is not part of the inventory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::container::{ContainerSpec, FILES_DIR};
use crate::digest::{file_sha256, sha256_hex, slash_path};
use crate::engine::{image_record, EngineDriver, DATASET_ENV, EXTERNAL_DATASET_MOUNT};
use crate::error::{Error, Result};
use crate::store::{copy_tree, DatasetRef, ProjectId, ProjectType, SeedDecl, Store};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DOCKERFILE_PATH: &str = "environment/Dockerfile";
pub const UNIX_SCRIPT: &str = "runExperiment.sh";
pub const WINDOWS_SCRIPT: &str = "runExperiment.bat";
pub const IMAGE_ARCHIVE: &str = "image.tar";
pub const RESULTS_DIR: &str = "results";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackagedProject {
    pub name: String,
    pub description: String,
    pub project_type: ProjectType,
    pub seeds: Vec<SeedDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackageManifest {
    pub format_version: u32,
    pub project: PackagedProject,
    pub spec_digest: String,
    pub engine_tag: String,
    pub commands: Vec<String>,
    pub dataset: Option<DatasetRef>,
    pub embedded_image: bool,
    /// Digest of every packaged file except the manifest, keyed by path.
    pub inventory: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
    pub tool_version: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PackageOptions {
    /// Ship an exported image archive so the package runs offline.
    pub embed_image: bool,
}

/// One engine CLI call made by the package scripts.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Invocation {
    args: Vec<String>,
    on_failure: OnFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OnFailure {
    Abort,
    Record,
    Ignore,
}

enum Step {
    Engine(Invocation),
    /// Remove and recreate the results directory for run `n`.
    ResetResults(usize),
}

fn inv(args: &[&str], on_failure: OnFailure) -> Step {
    Step::Engine(Invocation {
        args: args.iter().map(|s| s.to_string()).collect(),
        on_failure,
    })
}

fn script_steps(manifest: &PackageManifest, sidecars: &[crate::container::Sidecar], network: &str, env: &BTreeMap<String, String>) -> Vec<Step> {
    let tag = manifest.engine_tag.as_str();
    let mut steps = Vec::new();
    if manifest.embedded_image {
        steps.push(inv(&["load", "-i", IMAGE_ARCHIVE], OnFailure::Abort));
    } else {
        steps.push(inv(&["build", "-t", tag, "-f", DOCKERFILE_PATH, "."], OnFailure::Abort));
    }
    let prefix = tag.replace([':', '/'], "-");
    let mut sidecar_names = Vec::new();
    if !sidecars.is_empty() {
        steps.push(inv(&["network", "create", network], OnFailure::Ignore));
        for s in sidecars {
            let name = format!("{network}-{}", s.alias);
            steps.push(inv(&["rm", "-f", &name], OnFailure::Ignore));
            let mut args: Vec<String> = ["run", "-d", "--name", &name, "--network", network, "--network-alias", &s.alias]
                .iter()
                .map(|a| a.to_string())
                .collect();
            for (k, v) in &s.env {
                args.push("-e".into());
                args.push(format!("{k}={v}"));
            }
            args.push(s.image.clone());
            steps.push(Step::Engine(Invocation {
                args,
                on_failure: OnFailure::Abort,
            }));
            sidecar_names.push(name);
        }
    }
    let mut run_env = env.clone();
    let mut mounts = Vec::new();
    if let Some(ds) = &manifest.dataset {
        if ds.external {
            mounts.push(format!("{}:{EXTERNAL_DATASET_MOUNT}:ro", ds.root));
            run_env.insert(DATASET_ENV.into(), EXTERNAL_DATASET_MOUNT.into());
        } else {
            run_env.insert(DATASET_ENV.into(), format!("{FILES_DIR}/{}", ds.root));
        }
    }
    for (i, command) in manifest.commands.iter().enumerate() {
        let n = i + 1;
        let name = format!("{prefix}-run-{n}");
        steps.push(inv(&["rm", "-f", &name], OnFailure::Ignore));
        let mut args: Vec<String> = vec!["create".into(), "--name".into(), name.clone(), "-w".into(), FILES_DIR.into()];
        if !sidecars.is_empty() {
            args.push("--network".into());
            args.push(network.into());
        }
        for m in &mounts {
            args.push("-v".into());
            args.push(m.clone());
        }
        for (k, v) in &run_env {
            args.push("-e".into());
            args.push(format!("{k}={v}"));
        }
        args.extend([tag.to_string(), "sh".into(), "-c".into(), command.clone()]);
        steps.push(Step::Engine(Invocation {
            args,
            on_failure: OnFailure::Abort,
        }));
        steps.push(inv(&["start", "-a", &name], OnFailure::Record));
        steps.push(Step::ResetResults(n));
        steps.push(inv(&["cp", &format!("{name}:{FILES_DIR}"), &format!("{RESULTS_DIR}/run-{n}")], OnFailure::Record));
        steps.push(inv(&["rm", "-f", &name], OnFailure::Ignore));
    }
    for name in &sidecar_names {
        steps.push(inv(&["rm", "-f", name], OnFailure::Ignore));
    }
    if !sidecars.is_empty() {
        steps.push(inv(&["network", "rm", network], OnFailure::Ignore));
    }
    steps
}

fn is_plain(token: &str) -> bool {
    !token.is_empty()
        && token
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:=@+,".contains(c))
}

fn sh_quote(token: &str) -> String {
    if is_plain(token) {
        token.to_string()
    } else {
        format!("'{}'", token.replace('\'', r"'\''"))
    }
}

fn bat_quote(token: &str) -> String {
    let escaped = token.replace('%', "%%");
    if is_plain(token) {
        escaped
    } else {
        format!("\"{}\"", escaped.replace('"', "\\\""))
    }
}

fn render_sh(steps: &[Step]) -> String {
    let mut s = String::from(
        "#!/bin/sh\n\
         # Rebuilds the experiment image and runs each recorded command.\n\
         # Outputs of command N are copied to results/run-N.\n\
         # Set ENGINE to use a Docker-compatible CLI other than docker.\n\
         cd \"$(dirname \"$0\")\" || exit 1\n\
         ENGINE=\"${ENGINE:-docker}\"\n\
         if ! \"$ENGINE\" info >/dev/null 2>&1; then\n\
         \x20 echo \"Container engine '$ENGINE' is not available. Install Docker and make sure it is running.\" >&2\n\
         \x20 exit 1\n\
         fi\n\
         status=0\n\
         mkdir -p results\n",
    );
    for step in steps {
        match step {
            Step::Engine(i) => {
                let args: Vec<String> = i.args.iter().map(|a| sh_quote(a)).collect();
                let suffix = match i.on_failure {
                    OnFailure::Abort => " || exit 1",
                    OnFailure::Record => " || status=1",
                    OnFailure::Ignore => " >/dev/null 2>&1",
                };
                s.push_str(&format!("\"$ENGINE\" {}{suffix}\n", args.join(" ")));
            }
            Step::ResetResults(n) => s.push_str(&format!("rm -rf {RESULTS_DIR}/run-{n}\n")),
        }
    }
    s.push_str("exit $status\n");
    s
}

fn render_bat(steps: &[Step]) -> String {
    let mut s = String::from(
        "@echo off\r\n\
         rem Rebuilds the experiment image and runs each recorded command.\r\n\
         rem Outputs of command N are copied to results\\run-N.\r\n\
         rem Set ENGINE to use a Docker-compatible CLI other than docker.\r\n\
         setlocal\r\n\
         cd /d \"%~dp0\"\r\n\
         if \"%ENGINE%\"==\"\" set \"ENGINE=docker\"\r\n\
         \"%ENGINE%\" info >nul 2>&1\r\n\
         if errorlevel 1 (\r\n\
         \x20 echo Container engine \"%ENGINE%\" is not available. Install Docker Desktop and make sure it is running. 1>&2\r\n\
         \x20 pause\r\n\
         \x20 exit /b 1\r\n\
         )\r\n\
         set STATUS=0\r\n\
         if not exist results mkdir results\r\n",
    );
    for step in steps {
        match step {
            Step::Engine(i) => {
                let args: Vec<String> = i.args.iter().map(|a| bat_quote(a)).collect();
                let suffix = match i.on_failure {
                    OnFailure::Abort => " || exit /b 1",
                    OnFailure::Record => " || set STATUS=1",
                    OnFailure::Ignore => " >nul 2>&1",
                };
                s.push_str(&format!("\"%ENGINE%\" {}{suffix}\r\n", args.join(" ")));
            }
            Step::ResetResults(n) => s.push_str(&format!(
                "if exist {RESULTS_DIR}\\run-{n} rmdir /s /q {RESULTS_DIR}\\run-{n}\r\n"
            )),
        }
    }
    s.push_str("exit /b %STATUS%\r\n");
    s
}

/// Script flavor for [`engine_invocations`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptKind {
    Unix,
    Windows,
}

/// Engine argument lists found in a package script, in order.
pub fn engine_invocations(script: &str, kind: ScriptKind) -> Result<Vec<Vec<String>>> {
    let prefix = match kind {
        ScriptKind::Unix => "\"$ENGINE\" ",
        ScriptKind::Windows => "\"%ENGINE%\" ",
    };
    let mut out = Vec::new();
    for line in script.lines() {
        let Some(rest) = line.trim_end_matches('\r').strip_prefix(prefix) else {
            continue;
        };
        let tokens = match kind {
            ScriptKind::Unix => split_sh(rest)?,
            ScriptKind::Windows => split_bat(rest)?,
        };
        // `info` is the availability probe, not part of the run
        if tokens.first().map(String::as_str) != Some("info") {
            out.push(tokens);
        }
    }
    Ok(out)
}

fn split_sh(line: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_token = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\'' => {
                in_token = true;
                loop {
                    match chars.next() {
                        Some('\'') => break,
                        Some(ch) => cur.push(ch),
                        None => return Err(Error::validation("unterminated quote in script")),
                    }
                }
            }
            ' ' if in_token => {
                tokens.push(std::mem::take(&mut cur));
                in_token = false;
            }
            ' ' => {}
            '\\' => {
                in_token = true;
                if let Some(ch) = chars.next() {
                    cur.push(ch);
                }
            }
            '|' | '>' if !in_token => break,
            ch => {
                in_token = true;
                cur.push(ch);
            }
        }
    }
    if in_token {
        tokens.push(cur);
    }
    Ok(tokens)
}

fn split_bat(line: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_token = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                in_token = true;
                loop {
                    match chars.next() {
                        Some('\\') if chars.peek() == Some(&'"') => {
                            chars.next();
                            cur.push('"');
                        }
                        Some('"') => break,
                        Some('%') if chars.peek() == Some(&'%') => {
                            chars.next();
                            cur.push('%');
                        }
                        Some(ch) => cur.push(ch),
                        None => return Err(Error::validation("unterminated quote in script")),
                    }
                }
            }
            ' ' if in_token => {
                tokens.push(std::mem::take(&mut cur));
                in_token = false;
            }
            ' ' => {}
            '%' if chars.peek() == Some(&'%') => {
                chars.next();
                in_token = true;
                cur.push('%');
            }
            '|' | '>' if !in_token => break,
            ch => {
                in_token = true;
                cur.push(ch);
            }
        }
    }
    if in_token {
        tokens.push(cur);
    }
    Ok(tokens)
}

fn write_file(path: &Path, bytes: &[u8], executable: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::at_path(parent))?;
    }
    fs::write(path, bytes).map_err(Error::at_path(path))?;
    #[cfg(unix)]
    if executable {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o755)).map_err(Error::at_path(path))?;
    }
    #[cfg(not(unix))]
    let _ = executable;
    Ok(())
}

/// Files below `dir` relevant to the inventory: everything except the
/// manifest and the results directory.
fn inventory_of(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut inventory = BTreeMap::new();
    let walker = WalkDir::new(dir)
        .min_depth(1)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && e.file_type().is_dir() && e.file_name() == RESULTS_DIR));
    for entry in walker {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e.into()))?;
        if entry.file_type().is_dir() {
            continue;
        }
        let rel = slash_path(entry.path().strip_prefix(dir).expect("below package dir"));
        if rel == MANIFEST_FILE {
            continue;
        }
        let digest = file_sha256(entry.path()).map_err(Error::at_path(entry.path()))?;
        inventory.insert(rel, digest);
    }
    Ok(inventory)
}

/// Export `commands` on image `tag_id` as a package in `out`, which must
/// not exist or be empty.
pub fn build_package(
    store: &Store,
    driver: &dyn EngineDriver,
    project_id: &ProjectId,
    tag_id: u64,
    commands: &[String],
    out: &Path,
    opts: PackageOptions,
) -> Result<PackageManifest> {
    if commands.is_empty() {
        return Err(Error::validation("a package needs at least one command"));
    }
    for c in commands {
        if c.trim().is_empty() || c.contains(['\n', '\r']) {
            return Err(Error::validation(format!("invalid package command {c:?}")));
        }
    }
    let project = store.project(project_id)?;
    let record = image_record(store, project_id, tag_id)?;
    let spec = ContainerSpec::parse(&record.dockerfile)?;
    if spec.digest() != record.image.spec_digest {
        return Err(Error::Integrity {
            message: "stored Dockerfile does not match the image's spec digest".into(),
            paths: vec![DOCKERFILE_PATH.into()],
        });
    }
    match fs::read_dir(out) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(Error::AlreadyExists(format!("non-empty package directory {}", out.display())));
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            fs::create_dir_all(out).map_err(Error::at_path(out))?;
        }
        Err(e) => return Err(Error::io(out.display().to_string(), e)),
    }

    write_file(&out.join(DOCKERFILE_PATH), record.dockerfile.as_bytes(), false)?;
    copy_tree(&store.files_root(project_id), &out.join("files"), false)?;
    if opts.embed_image {
        driver.check_available()?;
        driver.save_image(&record.image.engine_tag, &out.join(IMAGE_ARCHIVE))?;
    }

    let mut manifest = PackageManifest {
        format_version: FORMAT_VERSION,
        project: PackagedProject {
            name: project.name.clone(),
            description: project.description.clone(),
            project_type: project.project_type,
            seeds: project.seeds.clone(),
        },
        spec_digest: record.image.spec_digest.clone(),
        engine_tag: record.image.engine_tag.clone(),
        commands: commands.to_vec(),
        dataset: project.dataset.clone(),
        embedded_image: opts.embed_image,
        inventory: BTreeMap::new(),
        created_at: Utc::now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let steps = script_steps(
        &manifest,
        &record.plan.sidecars,
        &record.plan.network_name,
        &record.plan.connection_env,
    );
    write_file(&out.join(UNIX_SCRIPT), render_sh(&steps).as_bytes(), true)?;
    write_file(&out.join(WINDOWS_SCRIPT), render_bat(&steps).as_bytes(), false)?;

    manifest.inventory = inventory_of(out)?;
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_file(&out.join(MANIFEST_FILE), &bytes, false)?;
    Ok(manifest)
}

/// Check a package directory against its manifest.
pub fn verify_package(dir: &Path) -> Result<PackageManifest> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|_| Error::Integrity {
        message: "missing entries".into(),
        paths: vec![MANIFEST_FILE.into()],
    })?;
    let manifest: PackageManifest = serde_json::from_slice(&bytes).map_err(|source| Error::Metadata {
        context: manifest_path.display().to_string(),
        source,
    })?;
    if manifest.commands.is_empty() {
        return Err(Error::validation("package manifest lists no commands"));
    }
    let actual = inventory_of(dir)?;

    let missing: Vec<String> = manifest
        .inventory
        .keys()
        .filter(|p| !actual.contains_key(*p))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Integrity {
            message: "missing entries".into(),
            paths: missing,
        });
    }
    let mismatched: Vec<String> = manifest
        .inventory
        .iter()
        .filter(|(p, d)| actual.get(*p) != Some(*d))
        .map(|(p, _)| p.clone())
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Integrity {
            message: "digest mismatch".into(),
            paths: mismatched,
        });
    }
    let unlisted: Vec<String> = actual
        .keys()
        .filter(|p| !manifest.inventory.contains_key(*p))
        .cloned()
        .collect();
    if !unlisted.is_empty() {
        return Err(Error::Integrity {
            message: "inventory incomplete".into(),
            paths: unlisted,
        });
    }
    for required in [DOCKERFILE_PATH, UNIX_SCRIPT, WINDOWS_SCRIPT] {
        if !manifest.inventory.contains_key(required) {
            return Err(Error::Integrity {
                message: "missing entries".into(),
                paths: vec![required.into()],
            });
        }
    }
    let dockerfile = fs::read(dir.join(DOCKERFILE_PATH)).map_err(Error::at_path(&dir.join(DOCKERFILE_PATH)))?;
    if sha256_hex(&dockerfile) != manifest.spec_digest {
        return Err(Error::Integrity {
            message: "spec digest mismatch".into(),
            paths: vec![DOCKERFILE_PATH.into()],
        });
    }
    Ok(manifest)
}

/// Zip a package directory, keeping script permissions.
pub fn zip_package(dir: &Path, out: &Path) -> Result<PathBuf> {
    use zip::write::SimpleFileOptions;
    let file = fs::File::create(out).map_err(Error::at_path(out))?;
    let mut zip = zip::ZipWriter::new(file);
    let zip_err = |e: zip::result::ZipError| Error::io(out.display().to_string(), std::io::Error::other(e));
    let mut entries: Vec<PathBuf> = WalkDir::new(dir)
        .min_depth(1)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && e.file_type().is_dir() && e.file_name() == RESULTS_DIR))
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    entries.sort();
    for path in entries {
        let rel = slash_path(path.strip_prefix(dir).expect("below package dir"));
        let mode = if rel == UNIX_SCRIPT { 0o755 } else { 0o644 };
        let options = SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .unix_permissions(mode);
        zip.start_file(rel, options).map_err(zip_err)?;
        let bytes = fs::read(&path).map_err(Error::at_path(&path))?;
        zip.write_all(&bytes).map_err(Error::at_path(out))?;
    }
    zip.finish().map_err(zip_err)?;
    Ok(out.to_path_buf())
}
