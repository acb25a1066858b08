//! Engine driver that executes in local directories instead of containers.
//!
//! An "image" is a directory holding the `/files` tree produced by the build.
//! A "container" is a copy of that tree plus the command to run. Paths are
//! confined to `/files`; anything that needs a real root filesystem is
//! reported as unsupported instead of being approximated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{run_captured, Attachments, Captured, EngineDriver, RunOutcome, DATASET_ENV, DEFAULT_OUTPUT_LIMIT};
use crate::container::{resolve_workdir, ContainerSpec, DirectiveKind, FILES_DIR};
use crate::digest::{changed_entries, tree_digest};
use crate::error::{Error, Result};
use crate::store::{atomic_write, copy_tree};

/// What the sandbox can and cannot do, for diagnostics.
pub const SANDBOX_CAPABILITIES: &[&str] = &[
    "FROM is recorded, base image contents are not available",
    "WORKDIR must stay inside /files",
    "COPY sources are read from the build context",
    "package provisioning RUN lines (apt, apt-get, dpkg, update-alternatives, pip install) are skipped",
    "other RUN lines execute with sh -c in the mapped working directory",
    "external datasets are referenced in place, not mounted",
    "database sidecars are not supported",
];

const PROVISIONING: &[&str] = &["apt", "apt-get", "dpkg", "update-alternatives", "add-apt-repository"];

#[derive(Debug, Clone)]
pub struct SandboxDriver {
    root: PathBuf,
    extra_path: Vec<PathBuf>,
    output_limit: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ImageMeta {
    tag: String,
    dockerfile: String,
    base_image: String,
    workdir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContainerMeta {
    pub id: String,
    pub image: String,
    pub command: String,
    pub workdir: String,
    pub env: BTreeMap<String, String>,
}

impl SandboxDriver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SandboxDriver {
            root: root.into(),
            extra_path: Vec::new(),
            output_limit: DEFAULT_OUTPUT_LIMIT,
        }
    }

    /// Directories prepended to `PATH` for build and run commands.
    pub fn with_extra_path(mut self, dirs: Vec<PathBuf>) -> Self {
        self.extra_path = dirs;
        self
    }

    pub fn with_output_limit(mut self, limit: usize) -> Self {
        self.output_limit = limit;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn image_dir(&self, tag: &str) -> PathBuf {
        self.root.join("images").join(sanitize(tag))
    }

    fn container_dir(&self, id: &str) -> PathBuf {
        self.root.join("containers").join(sanitize(id))
    }

    fn path_env(&self) -> String {
        let mut parts: Vec<String> = self.extra_path.iter().map(|p| p.display().to_string()).collect();
        if let Ok(existing) = std::env::var("PATH") {
            parts.push(existing);
        }
        parts.join(":")
    }

    fn shell(&self, command: &str, cwd: &Path, env: &BTreeMap<String, String>) -> Result<Captured> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command).current_dir(cwd).env("PATH", self.path_env());
        for (k, v) in env {
            cmd.env(k, v);
        }
        run_captured(cmd, None, self.output_limit)
    }

    /// Create a container from `image`; returns its id.
    pub fn create(&self, image: &str, command: &str, env: BTreeMap<String, String>, name: Option<&str>) -> Result<String> {
        let image_dir = self.image_dir(image);
        if !image_dir.join("image.json").is_file() {
            return Err(Error::not_found(format!("sandbox image {image}")));
        }
        let id = name
            .map(str::to_string)
            .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let dir = self.container_dir(&id);
        if dir.exists() {
            return Err(Error::AlreadyExists(format!("sandbox container {id}")));
        }
        copy_tree(&image_dir.join("files"), &dir.join("files"), false)?;
        let meta = ContainerMeta {
            id: id.clone(),
            image: image.to_string(),
            command: command.to_string(),
            workdir: FILES_DIR.to_string(),
            env,
        };
        atomic_write(&dir.join("container.json"), &serde_json::to_vec_pretty(&meta).expect("serializes"))?;
        Ok(id)
    }

    fn container_meta(&self, id: &str) -> Result<ContainerMeta> {
        let path = self.container_dir(id).join("container.json");
        let bytes = fs::read(&path).map_err(|_| Error::not_found(format!("sandbox container {id}")))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Metadata {
            context: path.display().to_string(),
            source,
        })
    }

    /// Run the container's command to completion.
    pub fn start(&self, id: &str) -> Result<Captured> {
        let meta = self.container_meta(id)?;
        let files = self.container_dir(id).join("files");
        let cwd = map_container_path(&files, &meta.workdir)?;
        let mut env = meta.env.clone();
        if let Some(dataset) = env.get(DATASET_ENV).cloned() {
            if let Ok(mapped) = map_container_path(&files, &dataset) {
                env.insert(DATASET_ENV.into(), mapped.display().to_string());
            }
        }
        self.shell(&meta.command, &cwd, &env)
    }

    /// Host location of `container_path` inside container `id`.
    pub fn container_path(&self, id: &str, container_path: &str) -> Result<PathBuf> {
        self.container_meta(id)?;
        map_container_path(&self.container_dir(id).join("files"), container_path)
    }

    pub fn remove(&self, id: &str) -> Result<()> {
        let dir = self.container_dir(id);
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(dir.display().to_string(), e)),
        }
    }

    fn execute_build(&self, spec: &ContainerSpec, context: &Path, staging: &Path) -> Result<(String, String)> {
        let files = staging.join("files");
        fs::create_dir_all(&files).map_err(Error::at_path(&files))?;
        let mut cwd = "/".to_string();
        let mut log = String::new();
        let env = BTreeMap::new();
        for (step, d) in spec.directives().iter().enumerate() {
            log.push_str(&format!("step {}: {d}\n", step + 1));
            match d.kind {
                DirectiveKind::From => {}
                DirectiveKind::Workdir => {
                    let next = resolve_workdir(&cwd, &d.argument);
                    let host = map_container_path(&files, &next)?;
                    fs::create_dir_all(&host).map_err(Error::at_path(&host))?;
                    cwd = next;
                }
                DirectiveKind::Copy => copy_directive(&d.argument, context, &files, &cwd)?,
                DirectiveKind::Run => {
                    if is_provisioning(&d.argument) {
                        log.push_str("skipped: package provisioning\n");
                        continue;
                    }
                    let host = map_container_path(&files, &cwd)?;
                    let out = self.shell(&d.argument, &host, &env)?;
                    log.push_str(&out.combined());
                    if !out.success() {
                        return Err(Error::engine(
                            format!("build step {} `{}` exited with {}", step + 1, d, out.exit_code),
                            log,
                        ));
                    }
                }
            }
        }
        Ok((log, cwd))
    }
}

impl EngineDriver for SandboxDriver {
    fn name(&self) -> &'static str {
        "sandbox"
    }

    fn check_available(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(Error::at_path(&self.root))
    }

    fn build(&self, spec: &ContainerSpec, context: &Path, engine_tag: &str) -> Result<String> {
        self.check_available()?;
        let images = self.root.join("images");
        fs::create_dir_all(&images).map_err(Error::at_path(&images))?;
        let staging = tempfile::tempdir_in(&images).map_err(Error::at_path(&images))?;
        let (log, workdir) = self.execute_build(spec, context, staging.path())?;
        let meta = ImageMeta {
            tag: engine_tag.to_string(),
            dockerfile: spec.render(),
            base_image: spec.base_image().to_string(),
            workdir,
        };
        atomic_write(
            &staging.path().join("image.json"),
            &serde_json::to_vec_pretty(&meta).expect("serializes"),
        )?;
        let target = self.image_dir(engine_tag);
        if target.exists() {
            fs::remove_dir_all(&target).map_err(Error::at_path(&target))?;
        }
        let staged = staging.keep();
        fs::rename(&staged, &target).map_err(Error::at_path(&target))?;
        Ok(log)
    }

    fn image_exists(&self, engine_tag: &str) -> Result<bool> {
        Ok(self.image_dir(engine_tag).join("image.json").is_file())
    }

    fn run(&self, engine_tag: &str, command: &str, attachments: &Attachments) -> Result<RunOutcome> {
        if !attachments.sidecars.is_empty() {
            return Err(Error::NotSupported("the sandbox driver cannot start database sidecars".into()));
        }
        let mut env = attachments.env.clone();
        if let Some(mount) = &attachments.dataset {
            let location = match &mount.host_path {
                Some(host) => host.display().to_string(),
                None => mount.container_path.clone(),
            };
            env.insert(DATASET_ENV.into(), location);
        }
        let id = self.create(engine_tag, command, env, None)?;
        let result = (|| {
            let files = self.container_dir(&id).join("files");
            let before = tree_digest(&files)?;
            let captured = self.start(&id)?;
            let after = tree_digest(&files)?;
            Ok(RunOutcome {
                stdout: super::ConsoleBytes(captured.stdout),
                stderr: super::ConsoleBytes(captured.stderr),
                exit_code: captured.exit_code,
                changed_files: changed_entries(&before, &after),
                duration: captured.duration,
                stdout_truncated: captured.stdout_truncated,
                stderr_truncated: captured.stderr_truncated,
            })
        })();
        self.remove(&id)?;
        result
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Host path for an absolute container path under `/files`.
fn map_container_path(files: &Path, container_path: &str) -> Result<PathBuf> {
    let normalized = resolve_workdir("/", container_path);
    let rel = if normalized == FILES_DIR {
        ""
    } else if let Some(rest) = normalized.strip_prefix("/files/") {
        rest
    } else {
        return Err(Error::NotSupported(format!(
            "sandbox paths must stay inside {FILES_DIR}, got {container_path}"
        )));
    };
    Ok(if rel.is_empty() { files.to_path_buf() } else { files.join(rel) })
}

fn is_provisioning(command: &str) -> bool {
    let segments: Vec<&str> = command.split("&&").map(str::trim).filter(|s| !s.is_empty()).collect();
    !segments.is_empty()
        && segments.iter().all(|seg| {
            let words: Vec<&str> = seg.split_whitespace().collect();
            match words.as_slice() {
                [first, ..] if PROVISIONING.contains(first) => true,
                [pip, "install", ..] if pip.starts_with("pip") => true,
                [py, "-m", "pip", "install", ..] if py.starts_with("python") => true,
                _ => false,
            }
        })
}

fn copy_directive(argument: &str, context: &Path, files: &Path, cwd: &str) -> Result<()> {
    let parts: Vec<&str> = argument.split_whitespace().collect();
    let [src, dst] = parts.as_slice() else {
        return Err(Error::NotSupported(format!("sandbox COPY takes one source and one destination: {argument}")));
    };
    let src_rel = Path::new(src);
    if src_rel.is_absolute() || src_rel.components().any(|c| matches!(c, Component::ParentDir)) {
        return Err(Error::PathTraversal(format!("COPY source {src} leaves the build context")));
    }
    let source = context.join(src_rel);
    let target = map_container_path(files, &resolve_workdir(cwd, dst))?;
    if source.is_dir() {
        copy_tree(&source, &target, false)
    } else if source.is_file() {
        let dest = if dst.ends_with('/') || target.is_dir() {
            target.join(source.file_name().expect("file has a name"))
        } else {
            target
        };
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(Error::at_path(parent))?;
        }
        fs::copy(&source, &dest).map_err(Error::at_path(&source))?;
        Ok(())
    } else {
        Err(Error::engine(format!("COPY source {src} not found in build context"), ""))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::Directive;

    fn spec(lines: &[&str]) -> ContainerSpec {
        ContainerSpec::parse(&lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap()
    }

    fn context_with(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (path, body) in files {
            let p = dir.path().join("files").join(path);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, body).unwrap();
        }
        dir
    }

    #[test]
    fn provisioning_detection() {
        assert!(is_provisioning(" apt update &&  apt upgrade -y"));
        assert!(is_provisioning("update-alternatives --install /usr/bin/gcc gcc /usr/bin/gcc-8 2000"));
        assert!(is_provisioning("pip install -r requirements.txt"));
        assert!(!is_provisioning("mvn package"));
        assert!(!is_provisioning("apt update && make"));
    }

    #[test]
    fn container_paths_are_confined() {
        let files = Path::new("/tmp/x/files");
        assert_eq!(map_container_path(files, "/files").unwrap(), files);
        assert_eq!(map_container_path(files, "/files/a/../b").unwrap(), files.join("b"));
        assert!(matches!(map_container_path(files, "/etc"), Err(Error::NotSupported(_))));
    }

    #[test]
    fn build_and_run_reports_changes() {
        let ctx = context_with(&[("keep.txt", "k"), ("gone.txt", "g")]);
        let root = tempfile::tempdir().unwrap();
        let driver = SandboxDriver::new(root.path());
        let s = spec(&[
            "FROM ubuntu:20.04",
            "RUN apt install -y make",
            "WORKDIR /files",
            "COPY ./files .",
            "RUN echo built > built.txt",
        ]);
        let log = driver.build(&s, ctx.path(), "t:1").unwrap();
        assert!(log.contains("skipped"));
        assert!(driver.image_exists("t:1").unwrap());
        let out = driver
            .run("t:1", "cat built.txt; echo new > new.txt; rm gone.txt", &Attachments::default())
            .unwrap();
        assert_eq!(out.exit_code, 0);
        assert_eq!(out.stdout.as_bytes(), b"built\n");
        let keys: Vec<&str> = out.changed_files.keys().map(String::as_str).collect();
        assert_eq!(keys, ["gone.txt", "new.txt"]);
        assert_eq!(out.changed_files["gone.txt"], crate::digest::EntryDigest::Deleted);
        // runs never modify the image
        let again = driver.run("t:1", "ls", &Attachments::default()).unwrap();
        assert!(String::from_utf8_lossy(again.stdout.as_bytes()).contains("gone.txt"));
    }

    #[test]
    fn failing_build_step_is_engine_error() {
        let ctx = context_with(&[("a", "")]);
        let root = tempfile::tempdir().unwrap();
        let driver = SandboxDriver::new(root.path());
        let s = ContainerSpec::from_directives(vec![
            Directive::new(DirectiveKind::From, "ubuntu:20.04"),
            Directive::workdir("/files"),
            Directive::new(DirectiveKind::Copy, "./files ."),
            Directive::run("echo boom; exit 4"),
        ])
        .unwrap();
        match driver.build(&s, ctx.path(), "t:2") {
            Err(Error::Engine { log, .. }) => assert!(log.contains("boom")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!driver.image_exists("t:2").unwrap());
    }

    #[test]
    fn workdir_outside_files_is_unsupported() {
        let ctx = context_with(&[("a", "")]);
        let root = tempfile::tempdir().unwrap();
        let driver = SandboxDriver::new(root.path());
        let s = spec(&["FROM ubuntu:20.04", "WORKDIR /opt", "COPY ./files ."]);
        assert!(matches!(driver.build(&s, ctx.path(), "t:3"), Err(Error::NotSupported(_))));
    }

    #[test]
    fn sidecars_unsupported() {
        let root = tempfile::tempdir().unwrap();
        let driver = SandboxDriver::new(root.path());
        let att = Attachments {
            sidecars: vec![crate::container::Sidecar {
                image: "postgres:14".into(),
                env: BTreeMap::new(),
                alias: "postgres".into(),
                port: 5432,
                init_scripts: vec![],
            }],
            ..Default::default()
        };
        assert!(matches!(driver.run("x", "true", &att), Err(Error::NotSupported(_))));
    }

    #[test]
    fn dataset_env_is_mapped() {
        let ctx = context_with(&[("data/d.txt", "dd")]);
        let root = tempfile::tempdir().unwrap();
        let driver = SandboxDriver::new(root.path());
        let s = spec(&["FROM ubuntu:20.04", "WORKDIR /files", "COPY ./files ."]);
        driver.build(&s, ctx.path(), "t:4").unwrap();
        let att = Attachments {
            dataset: Some(super::super::DatasetMount {
                host_path: None,
                container_path: "/files/data".into(),
            }),
            ..Default::default()
        };
        let out = driver.run("t:4", "cat \"$DATASET_DIR/d.txt\"", &att).unwrap();
        assert_eq!(out.stdout.as_bytes(), b"dd");
    }
}
