//! Container engine drivers.
//!
//! [`EngineDriver`] is the contract every driver satisfies. [`DockerDriver`]
//! shells out to a Docker-compatible CLI; [`SandboxDriver`] executes in a
//! local temporary directory and is used for tests and machines without an
//! engine. Change detection is shared: both drivers diff digest trees of the
//! `/files` working directory taken before and after the command.

mod docker;
mod sandbox;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use docker::DockerDriver;
pub use sandbox::{SandboxDriver, SANDBOX_CAPABILITIES};

use crate::container::{ContainerSpec, EnvironmentPlan, Sidecar};
use crate::digest::DigestTree;
use crate::error::{Error, Result};
use crate::store::{ProjectId, Store};

/// Default console capture limit per stream.
pub const DEFAULT_OUTPUT_LIMIT: usize = 8 * 1024 * 1024;

/// Environment variable naming the dataset location inside the container.
pub const DATASET_ENV: &str = "DATASET_DIR";
/// Mount point of external datasets.
pub const EXTERNAL_DATASET_MOUNT: &str = "/dataset";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageRef {
    pub tag_id: u64,
    pub engine_tag: String,
    pub spec_digest: String,
}

/// Persisted form of a built image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageRecord {
    pub image: ImageRef,
    pub project_id: ProjectId,
    pub dockerfile: String,
    pub plan: EnvironmentPlan,
    pub driver: String,
    pub built_at: DateTime<Utc>,
    pub build_log: String,
}

/// Console bytes; serialized as a string when valid UTF-8, otherwise as
/// `{"base64": "..."}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsoleBytes(pub Vec<u8>);

impl ConsoleBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_string_lossy(&self) -> String {
        String::from_utf8_lossy(&self.0).into_owned()
    }
}

impl Serialize for ConsoleBytes {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(text) => s.serialize_str(text),
            Err(_) => {
                let mut map = BTreeMap::new();
                map.insert("base64", base64::engine::general_purpose::STANDARD.encode(&self.0));
                map.serialize(s)
            }
        }
    }
}

impl<'de> Deserialize<'de> for ConsoleBytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Encoded { base64: String },
        }
        match Repr::deserialize(d)? {
            Repr::Text(t) => Ok(ConsoleBytes(t.into_bytes())),
            Repr::Encoded { base64 } => base64::engine::general_purpose::STANDARD
                .decode(base64)
                .map(ConsoleBytes)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunOutcome {
    pub stdout: ConsoleBytes,
    pub stderr: ConsoleBytes,
    pub exit_code: i32,
    /// Working-tree entries that differ from the pre-run state; deletions
    /// carry a tombstone.
    pub changed_files: DigestTree,
    pub duration: f64,
    #[serde(default)]
    pub stdout_truncated: bool,
    #[serde(default)]
    pub stderr_truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetMount {
    /// Host directory for external datasets; `None` when the dataset is part
    /// of the copied tree.
    pub host_path: Option<PathBuf>,
    pub container_path: String,
}

#[derive(Debug, Clone, Default)]
pub struct Attachments {
    pub dataset: Option<DatasetMount>,
    pub sidecars: Vec<Sidecar>,
    pub network: Option<String>,
    pub env: BTreeMap<String, String>,
    /// Host files root, used to mount sidecar init scripts.
    pub files_root: Option<PathBuf>,
}

pub trait EngineDriver: Send + Sync {
    fn name(&self) -> &'static str;

    /// Fails with an actionable error when the engine cannot be used.
    fn check_available(&self) -> Result<()>;

    /// Build `spec` with `context` as build context and tag it `engine_tag`.
    /// Returns the build log.
    fn build(&self, spec: &ContainerSpec, context: &Path, engine_tag: &str) -> Result<String>;

    fn image_exists(&self, engine_tag: &str) -> Result<bool>;

    /// Run `command` with `/files` as working directory. A non-zero exit is
    /// reported in the outcome, not as an error.
    fn run(&self, engine_tag: &str, command: &str, attachments: &Attachments) -> Result<RunOutcome>;

    /// Export an image archive for offline reuse.
    fn save_image(&self, engine_tag: &str, _out: &Path) -> Result<()> {
        Err(Error::NotSupported(format!(
            "{} driver cannot export image {engine_tag}",
            self.name()
        )))
    }
}

pub fn engine_tag(project: &ProjectId, tag_id: u64) -> String {
    format!("reprokit-{}:{tag_id}", project.as_str().to_ascii_lowercase())
}

/// Build the plan's main spec and persist the resulting image record.
pub fn build_image(
    driver: &dyn EngineDriver,
    store: &Store,
    project: &ProjectId,
    plan: &EnvironmentPlan,
    context: &Path,
) -> Result<ImageRef> {
    let tag_id = store.allocate_tag(project)?;
    let image = ImageRef {
        tag_id,
        engine_tag: engine_tag(project, tag_id),
        spec_digest: plan.main_spec.digest(),
    };
    let build_log = driver.build(&plan.main_spec, context, &image.engine_tag)?;
    let record = ImageRecord {
        image: image.clone(),
        project_id: project.clone(),
        dockerfile: plan.main_spec.render(),
        plan: plan.clone(),
        driver: driver.name().to_string(),
        built_at: Utc::now(),
        build_log,
    };
    store.put_record(project, "images", &tag_id.to_string(), &record, true)?;
    Ok(image)
}

/// Image record of `tag_id`, checked to belong to `project`.
pub fn image_record(store: &Store, project: &ProjectId, tag_id: u64) -> Result<ImageRecord> {
    let owner = store.tag_owner(tag_id)?;
    if &owner != project {
        return Err(Error::not_found(format!("image with tagId {tag_id} in project {project}")));
    }
    store
        .get_record(project, "images", &tag_id.to_string())?
        .ok_or_else(|| Error::not_found(format!("image with tagId {tag_id}")))
}

/// Run `command` on a stored image.
pub fn run(
    driver: &dyn EngineDriver,
    store: &Store,
    project: &ProjectId,
    tag_id: u64,
    command: &str,
    attachments: &Attachments,
) -> Result<RunOutcome> {
    if command.trim().is_empty() {
        return Err(Error::validation("command must not be empty"));
    }
    let record = image_record(store, project, tag_id)?;
    if !driver.image_exists(&record.image.engine_tag)? {
        return Err(Error::not_found(format!(
            "image {} in the {} engine",
            record.image.engine_tag,
            driver.name()
        )));
    }
    driver.run(&record.image.engine_tag, command, attachments)
}

/// Result of a finished engine process.
#[derive(Debug)]
pub struct Captured {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub exit_code: i32,
    pub duration: f64,
}

impl Captured {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }

    /// Both streams, for error messages.
    pub fn combined(&self) -> String {
        let mut s = String::from_utf8_lossy(&self.stdout).into_owned();
        s.push_str(&String::from_utf8_lossy(&self.stderr));
        s
    }
}

pub(crate) fn truncation_marker(limit: usize) -> String {
    format!("\n[reprokit: output truncated after {limit} bytes]\n")
}

fn read_capped(mut reader: impl Read, limit: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut buf = [0u8; 16 * 1024];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = limit.saturating_sub(kept.len());
                if n > room {
                    truncated = true;
                }
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    if truncated {
        kept.extend_from_slice(truncation_marker(limit).as_bytes());
    }
    (kept, truncated)
}

/// Run a process to completion capturing both streams up to `limit` bytes
/// each; the rest is drained and replaced by a truncation marker.
pub(crate) fn run_captured(mut cmd: Command, stdin: Option<&[u8]>, limit: usize) -> Result<Captured> {
    let program = format!("{:?}", cmd.get_program());
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
    cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() });
    let start = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::engine(format!("cannot start {program}: {e}"), ""))?;
    if let (Some(bytes), Some(mut pipe)) = (stdin, child.stdin.take()) {
        use std::io::Write;
        let _ = pipe.write_all(bytes);
    }
    let out = child.stdout.take().expect("piped stdout");
    let err = child.stderr.take().expect("piped stderr");
    let out_thread = std::thread::spawn(move || read_capped(out, limit));
    let err_thread = std::thread::spawn(move || read_capped(err, limit));
    let status = child
        .wait()
        .map_err(|e| Error::engine(format!("waiting for {program}: {e}"), ""))?;
    let (stdout, stdout_truncated) = out_thread.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err_thread.join().unwrap_or_default();
    Ok(Captured {
        stdout,
        stderr,
        stdout_truncated,
        stderr_truncated,
        exit_code: exit_code(status),
        duration: start.elapsed().as_secs_f64(),
    })
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    -1
}

/// Last `lines` lines of a log, for error messages.
pub(crate) fn log_excerpt(log: &str, lines: usize) -> String {
    let all: Vec<&str> = log.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}
