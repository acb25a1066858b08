//! Driver for Docker-compatible command-line engines (docker, podman).

use std::path::{Path, PathBuf};
use std::process::Command;

use super::{log_excerpt, run_captured, Attachments, Captured, ConsoleBytes, EngineDriver, RunOutcome};
use super::{DATASET_ENV, DEFAULT_OUTPUT_LIMIT, EXTERNAL_DATASET_MOUNT};
use crate::container::FILES_DIR;
use crate::digest::{changed_entries, tree_digest, DigestTree};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DockerDriver {
    program: PathBuf,
    output_limit: usize,
}

impl Default for DockerDriver {
    fn default() -> Self {
        DockerDriver::new("docker")
    }
}

impl DockerDriver {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        DockerDriver {
            program: program.into(),
            output_limit: DEFAULT_OUTPUT_LIMIT,
        }
    }

    pub fn with_output_limit(mut self, limit: usize) -> Self {
        self.output_limit = limit;
        self
    }

    pub fn program(&self) -> &Path {
        &self.program
    }

    fn cli(&self, args: &[&str]) -> Result<Captured> {
        let mut cmd = Command::new(&self.program);
        cmd.args(args);
        run_captured(cmd, None, self.output_limit)
    }

    /// Run a CLI subcommand that must succeed.
    fn checked(&self, what: &str, args: &[&str]) -> Result<Captured> {
        let out = self.cli(args)?;
        if !out.success() {
            let log = out.combined();
            return Err(Error::engine(
                format!("{what} failed (exit {}): {}", out.exit_code, log_excerpt(&log, 5)),
                log,
            ));
        }
        Ok(out)
    }

    fn snapshot(&self, container: &str, dest: &Path) -> Result<DigestTree> {
        let src = format!("{container}:{FILES_DIR}");
        let dest_str = dest.display().to_string();
        self.checked("copying the working tree out of the container", &["cp", &src, &dest_str])?;
        tree_digest(dest)
    }

    fn start_sidecars(&self, attachments: &Attachments) -> Result<Vec<String>> {
        let Some(network) = &attachments.network else {
            return Err(Error::validation("database sidecars need a network"));
        };
        let net = self.cli(&["network", "create", network])?;
        if !net.success() && !net.combined().contains("already exists") {
            return Err(Error::engine(format!("creating network {network} failed"), net.combined()));
        }
        let mut started = Vec::new();
        for sidecar in &attachments.sidecars {
            let name = format!("{network}-{}", sidecar.alias);
            let _ = self.cli(&["rm", "-f", &name]);
            let mut args: Vec<String> = vec![
                "run".into(),
                "-d".into(),
                "--name".into(),
                name.clone(),
                "--network".into(),
                network.clone(),
                "--network-alias".into(),
                sidecar.alias.clone(),
            ];
            for (k, v) in &sidecar.env {
                args.push("-e".into());
                args.push(format!("{k}={v}"));
            }
            for script in &sidecar.init_scripts {
                let root = attachments
                    .files_root
                    .as_ref()
                    .ok_or_else(|| Error::validation("init scripts need the project files root"))?;
                let file_name = Path::new(script).file_name().and_then(|n| n.to_str()).unwrap_or("init");
                args.push("-v".into());
                args.push(format!(
                    "{}:/docker-entrypoint-initdb.d/{file_name}:ro",
                    root.join(script).display()
                ));
            }
            args.push(sidecar.image.clone());
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            if let Err(e) = self.checked(&format!("starting {} sidecar", sidecar.alias), &refs) {
                self.stop_sidecars(&started, attachments);
                return Err(e);
            }
            started.push(name);
        }
        Ok(started)
    }

    fn stop_sidecars(&self, names: &[String], attachments: &Attachments) {
        for name in names {
            let _ = self.cli(&["rm", "-f", name]);
        }
        if let Some(network) = &attachments.network {
            let _ = self.cli(&["network", "rm", network]);
        }
    }

    fn run_main(&self, engine_tag: &str, command: &str, attachments: &Attachments) -> Result<RunOutcome> {
        let name = format!("reprokit-run-{}", uuid::Uuid::new_v4().simple());
        let mut args: Vec<String> = vec!["create".into(), "--name".into(), name.clone(), "-w".into(), FILES_DIR.into()];
        if !attachments.sidecars.is_empty() {
            if let Some(network) = &attachments.network {
                args.push("--network".into());
                args.push(network.clone());
            }
        }
        let mut env = attachments.env.clone();
        if let Some(mount) = &attachments.dataset {
            match &mount.host_path {
                Some(host) => {
                    args.push("-v".into());
                    args.push(format!("{}:{EXTERNAL_DATASET_MOUNT}:ro", host.display()));
                    env.insert(DATASET_ENV.into(), EXTERNAL_DATASET_MOUNT.into());
                }
                None => {
                    env.insert(DATASET_ENV.into(), mount.container_path.clone());
                }
            }
        }
        for (k, v) in &env {
            args.push("-e".into());
            args.push(format!("{k}={v}"));
        }
        args.extend([engine_tag.to_string(), "sh".into(), "-c".into(), command.to_string()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        self.checked("creating the run container", &refs)?;

        let result = (|| {
            let scratch = tempfile::tempdir().map_err(|e| Error::io("scratch directory", e))?;
            let before = self.snapshot(&name, &scratch.path().join("before"))?;
            let captured = self.cli(&["start", "-a", &name])?;
            let after = self.snapshot(&name, &scratch.path().join("after"))?;
            Ok(RunOutcome {
                stdout: ConsoleBytes(captured.stdout),
                stderr: ConsoleBytes(captured.stderr),
                exit_code: captured.exit_code,
                changed_files: changed_entries(&before, &after),
                duration: captured.duration,
                stdout_truncated: captured.stdout_truncated,
                stderr_truncated: captured.stderr_truncated,
            })
        })();
        let _ = self.cli(&["rm", "-f", &name]);
        result
    }
}

impl EngineDriver for DockerDriver {
    fn name(&self) -> &'static str {
        "docker"
    }

    fn check_available(&self) -> Result<()> {
        match self.cli(&["info"]) {
            Ok(out) if out.success() => Ok(()),
            Ok(out) => Err(Error::engine(
                format!(
                    "container engine {} is not usable; is the daemon running? {}",
                    self.program.display(),
                    log_excerpt(&out.combined(), 3)
                ),
                out.combined(),
            )),
            Err(_) => Err(Error::engine(
                format!(
                    "container engine {} is not installed; install Docker or select the sandbox driver",
                    self.program.display()
                ),
                "",
            )),
        }
    }

    fn build(&self, spec: &crate::container::ContainerSpec, context: &Path, engine_tag: &str) -> Result<String> {
        let scratch = tempfile::tempdir().map_err(|e| Error::io("scratch directory", e))?;
        let dockerfile = scratch.path().join("Dockerfile");
        std::fs::write(&dockerfile, spec.render()).map_err(Error::at_path(&dockerfile))?;
        let file = dockerfile.display().to_string();
        let ctx = context.display().to_string();
        let out = self.checked("image build", &["build", "-t", engine_tag, "-f", &file, &ctx])?;
        Ok(out.combined())
    }

    fn image_exists(&self, engine_tag: &str) -> Result<bool> {
        Ok(self.cli(&["image", "inspect", engine_tag])?.success())
    }

    fn run(&self, engine_tag: &str, command: &str, attachments: &Attachments) -> Result<RunOutcome> {
        let sidecars = if attachments.sidecars.is_empty() {
            Vec::new()
        } else {
            self.start_sidecars(attachments)?
        };
        let result = self.run_main(engine_tag, command, attachments);
        if !attachments.sidecars.is_empty() {
            self.stop_sidecars(&sidecars, attachments);
        }
        result
    }

    fn save_image(&self, engine_tag: &str, out: &Path) -> Result<()> {
        let dest = out.display().to_string();
        self.checked("image export", &["save", "-o", &dest, engine_tag])?;
        Ok(())
    }
}
