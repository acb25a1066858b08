#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use reprokit::service::{DriverKind, Service, ServiceConfig};
use walkdir::WalkDir;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture_text(rel: &str) -> String {
    let path = fixtures().join(rel);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Sandbox-backed configuration rooted in `dir`, with the fixture tool stubs
/// (`mvn`) on the sandbox `PATH`.
pub fn sandbox_config(dir: &Path) -> ServiceConfig {
    let mut config = ServiceConfig::new(dir.join("store"), DriverKind::Sandbox);
    config.sandbox_dir = Some(dir.join("sandbox"));
    config.sandbox_path = vec![fixtures().join("bin")];
    config
}

pub fn sandbox_service(dir: &Path) -> Service {
    Service::open(sandbox_config(dir)).expect("service opens")
}

pub fn zip_dir(dir: &Path) -> Vec<u8> {
    let mut writer = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(dir).unwrap();
        if rel.as_os_str().is_empty() {
            continue;
        }
        let name = rel.to_string_lossy().replace('\\', "/");
        if entry.file_type().is_dir() {
            writer.add_directory(name, opts).unwrap();
        } else {
            writer.start_file(name, opts).unwrap();
            writer.write_all(&fs::read(entry.path()).unwrap()).unwrap();
        }
    }
    writer.finish().unwrap().into_inner()
}

pub fn reprokit_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_reprokit"))
}

/// A docker-compatible executable that forwards to `reprokit sandbox-engine`
/// with its own sandbox root.
pub fn engine_shim(dir: &Path, sandbox_root: &Path) -> PathBuf {
    let path = dir.join("engine.sh");
    let script = format!(
        "#!/bin/sh\nREPROKIT_SANDBOX_DIR='{}' REPROKIT_SANDBOX_PATH='{}' exec '{}' sandbox-engine \"$@\"\n",
        sandbox_root.display(),
        fixtures().join("bin").display(),
        reprokit_bin().display(),
    );
    fs::write(&path, script).unwrap();
    make_executable(&path);
    path
}

pub fn make_executable(path: &Path) {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mut perm = fs::metadata(path).unwrap().permissions();
        perm.set_mode(0o755);
        fs::set_permissions(path, perm).unwrap();
    }
}

pub fn have(program: &str, arg: &str) -> bool {
    std::process::Command::new(program)
        .arg(arg)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}
