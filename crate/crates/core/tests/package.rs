mod common;

use std::fs;
use std::path::{Path, PathBuf};

use reprokit::container::EnvironmentRequest;
use reprokit::package::{engine_invocations, verify_package, PackageManifest, ScriptKind, MANIFEST_FILE};
use reprokit::service::{CreateProjectRequest, PackageRequest, RunRequest, Service, Upload};
use reprokit::store::ProjectType;
use reprokit::Error;

use common::*;

const COMMAND: &str = "cat RLCheck/jqf/target/build.txt";

fn packaged(root: &Path) -> (Service, PathBuf) {
    let svc = sandbox_service(root);
    let p = svc
        .create_project(&CreateProjectRequest {
            name: "e8".into(),
            description: "RLCheck".into(),
            project_type: ProjectType::Script,
        })
        .unwrap();
    let id = p.id.to_string();
    svc.add_files(&id, Upload::Path(fixtures().join("e8/tree"))).unwrap();
    let req = EnvironmentRequest::from_json(&fixture_text("e8/request.json")).unwrap();
    let env = svc.environment(&id, &req).unwrap();
    svc.run(
        &id,
        &RunRequest {
            command: COMMAND.into(),
            tag_id: env.tag_id,
            dataset_id: None,
        },
    )
    .unwrap();
    let out = root.join("pkg");
    svc.package(
        &id,
        &PackageRequest {
            tag_id: env.tag_id,
            out: Some(out.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    (svc, out)
}

fn manifest(dir: &Path) -> PackageManifest {
    serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn integrity(err: Error) -> (String, Vec<String>) {
    match err {
        Error::Integrity { message, paths } => (message, paths),
        other => panic!("expected an integrity error, got {other}"),
    }
}

#[test]
fn fresh_package_verifies_and_lists_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    let m = verify_package(&dir).unwrap();
    assert_eq!(m.commands, [COMMAND]);
    for required in ["environment/Dockerfile", "runExperiment.sh", "runExperiment.bat", "files/pom.xml"] {
        assert!(m.inventory.contains_key(required), "{required} not listed");
    }
    assert!(!m.inventory.contains_key(MANIFEST_FILE));
    assert_eq!(fs::read_to_string(dir.join("environment/Dockerfile")).unwrap(), fixture_text("e8/Dockerfile"));
}

#[test]
fn altered_file_is_a_digest_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    fs::write(dir.join("files/requirements.txt"), "numpy==0.1\n").unwrap();
    let (message, paths) = integrity(verify_package(&dir).unwrap_err());
    assert_eq!(message, "digest mismatch");
    assert_eq!(paths, ["files/requirements.txt"]);
}

#[test]
fn removed_inventory_entry_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    let mut m = manifest(&dir);
    m.inventory.remove("files/pom.xml").unwrap();
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&m).unwrap()).unwrap();
    let (message, paths) = integrity(verify_package(&dir).unwrap_err());
    assert_eq!(message, "inventory incomplete");
    assert_eq!(paths, ["files/pom.xml"]);
}

#[test]
fn deleted_and_added_files_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    fs::remove_file(dir.join("runExperiment.bat")).unwrap();
    let (message, paths) = integrity(verify_package(&dir).unwrap_err());
    assert_eq!(message, "missing entries");
    assert_eq!(paths, ["runExperiment.bat"]);

    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    fs::write(dir.join("files/extra.py"), "import os\n").unwrap();
    let (message, paths) = integrity(verify_package(&dir).unwrap_err());
    assert_eq!(message, "inventory incomplete");
    assert_eq!(paths, ["files/extra.py"]);
}

#[test]
fn dockerfile_must_match_spec_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    let edited = fixture_text("e8/Dockerfile") + "RUN echo tampered\n";
    fs::write(dir.join("environment/Dockerfile"), &edited).unwrap();
    let mut m = manifest(&dir);
    m.inventory.insert(
        "environment/Dockerfile".into(),
        reprokit::digest::sha256_hex(edited.as_bytes()),
    );
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&m).unwrap()).unwrap();
    let (message, _) = integrity(verify_package(&dir).unwrap_err());
    assert_eq!(message, "spec digest mismatch");
}

#[test]
fn results_from_a_replay_do_not_break_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    fs::create_dir_all(dir.join("results/run-1")).unwrap();
    fs::write(dir.join("results/run-1/out.txt"), "x").unwrap();
    verify_package(&dir).unwrap();
}

#[test]
fn unix_and_windows_scripts_issue_the_same_engine_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    let sh = fs::read_to_string(dir.join("runExperiment.sh")).unwrap();
    let bat = fs::read_to_string(dir.join("runExperiment.bat")).unwrap();
    let unix = engine_invocations(&sh, ScriptKind::Unix).unwrap();
    let windows = engine_invocations(&bat, ScriptKind::Windows).unwrap();
    assert!(!unix.is_empty());
    assert_eq!(unix, windows);
    assert!(unix.iter().any(|args| args.first().map(String::as_str) == Some("build")));
    assert!(unix.iter().any(|args| args.last().map(String::as_str) == Some(COMMAND)));
}

#[test]
fn replay_through_the_sandbox_engine() {
    let tmp = tempfile::tempdir().unwrap();
    let (_svc, dir) = packaged(tmp.path());
    let engine = engine_shim(tmp.path(), &tmp.path().join("replay"));
    let out = std::process::Command::new("sh")
        .arg("runExperiment.sh")
        .current_dir(&dir)
        .env("ENGINE", &engine)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("results/run-1/RLCheck/jqf/target/build.txt").is_file());

    let missing = tmp.path().join("no-such-engine");
    let out = std::process::Command::new("sh")
        .arg("runExperiment.sh")
        .current_dir(&dir)
        .env("ENGINE", &missing)
        .output()
        .unwrap();
    assert!(!out.status.success());
}
