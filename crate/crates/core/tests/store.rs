mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use reprokit::digest::sha256_hex;
use reprokit::store::{EntryAction, FileNode, NodeKind, ProjectType, Source, Store};
use reprokit::Error;

use common::*;

fn write_tree(root: &Path, files: &BTreeMap<String, Vec<u8>>) {
    for (path, bytes) in files {
        let full = root.join(path);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(full, bytes).unwrap();
    }
}

fn file_map(nodes: &[FileNode]) -> BTreeMap<String, (u64, String)> {
    nodes
        .iter()
        .filter(|n| n.kind == NodeKind::File)
        .map(|n| (n.path.clone(), (n.size.unwrap(), n.digest.clone().unwrap())))
        .collect()
}

fn tree_strategy() -> impl Strategy<Value = BTreeMap<String, Vec<u8>>> {
    prop::collection::btree_map(
        "[a-z]{1,5}(/[a-z]{1,5}){0,2}\\.(txt|py|cpp)",
        prop::collection::vec(any::<u8>(), 0..64),
        1..12,
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ingested_tree_round_trips(files in tree_strategy()) {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_tree(&src, &files);
        let store = Store::open(tmp.path().join("store")).unwrap();
        let project = store.create_project("p", "", ProjectType::Script).unwrap();
        store.ingest(&project.id, Source::LocalDir(src.clone())).unwrap();

        let want: BTreeMap<String, (u64, String)> = files
            .iter()
            .map(|(p, b)| (p.clone(), (b.len() as u64, sha256_hex(b))))
            .collect();
        let reopened = Store::open(tmp.path().join("store")).unwrap();
        let stored = reopened.project(&project.id).unwrap();
        prop_assert_eq!(file_map(&stored.files), want.clone());
        for (path, bytes) in &files {
            prop_assert_eq!(&fs::read(reopened.files_root(&project.id).join(path)).unwrap(), bytes);
        }

        let zipped = reopened.create_project("z", "", ProjectType::Script).unwrap();
        reopened.ingest(&zipped.id, Source::ZipBytes(zip_dir(&src))).unwrap();
        prop_assert_eq!(file_map(&reopened.project(&zipped.id).unwrap().files), want);
    }
}

#[test]
fn entries_can_be_created_edited_and_deleted() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(tmp.path()).unwrap();
    let p = store.create_project("p", "", ProjectType::Script).unwrap();

    store.modify_entry(&p.id, "src", EntryAction::CreateFolder).unwrap();
    let node = store
        .modify_entry(&p.id, "src/main.py", EntryAction::CreateFile(b"print(1)\n".to_vec()))
        .unwrap()
        .unwrap();
    assert_eq!(node.digest.as_deref(), Some(sha256_hex(b"print(1)\n").as_str()));

    store
        .modify_entry(&p.id, "src/main.py", EntryAction::EditFile(b"print(2)\n".to_vec()))
        .unwrap();
    let project = store.project(&p.id).unwrap();
    assert_eq!(project.node("src/main.py").unwrap().digest.as_deref(), Some(sha256_hex(b"print(2)\n").as_str()));

    store.modify_entry(&p.id, "src", EntryAction::Delete).unwrap();
    let project = store.project(&p.id).unwrap();
    assert!(project.node("src").is_none() && project.node("src/main.py").is_none());
    assert!(!store.files_root(&p.id).join("src").exists());
}

#[test]
fn escaping_entry_paths_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(tmp.path().join("store")).unwrap();
    let p = store.create_project("p", "", ProjectType::Script).unwrap();
    for bad in ["../outside.txt", "a/../../b", "/etc/passwd"] {
        let err = store
            .modify_entry(&p.id, bad, EntryAction::CreateFile(b"x".to_vec()))
            .unwrap_err();
        assert!(matches!(err, Error::PathTraversal(_) | Error::Validation(_)), "{bad}: {err}");
    }
    assert!(!tmp.path().join("outside.txt").exists());
}

#[test]
fn traversing_zip_is_rejected_without_partial_writes() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(tmp.path().join("store")).unwrap();
    let p = store.create_project("p", "", ProjectType::Script).unwrap();

    let mut w = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default();
    w.start_file("good.txt", opts).unwrap();
    w.write_all(b"fine").unwrap();
    w.start_file("../evil.txt", opts).unwrap();
    w.write_all(b"bad").unwrap();
    let bytes = w.finish().unwrap().into_inner();

    let err = store.ingest(&p.id, Source::ZipBytes(bytes)).unwrap_err();
    assert!(matches!(err, Error::PathTraversal(_)), "{err}");
    assert!(store.project(&p.id).unwrap().files.is_empty());
    assert!(!store.files_root(&p.id).join("good.txt").exists());
}

fn git(dir: &Path, args: &[&str]) -> String {
    let out = Command::new("git")
        .args(["-c", "user.name=t", "-c", "user.email=t@example.com", "-c", "init.defaultBranch=main"])
        .args(args)
        .current_dir(dir)
        .output()
        .expect("git runs");
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn git_ingest_matches_tracked_files() {
    if !have("git", "--version") {
        eprintln!("git not installed; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let repo = tmp.path().join("repo");
    fs::create_dir_all(repo.join("src/nested")).unwrap();
    fs::write(repo.join("src/main.cpp"), "int main() { return 0; }\n").unwrap();
    fs::write(repo.join("src/nested/util.py"), "import numpy\n").unwrap();
    fs::write(repo.join("README.md"), "experiment\n").unwrap();
    fs::write(repo.join(".gitignore"), "*.log\n").unwrap();
    git(&repo, &["init", "-q"]);
    git(&repo, &["add", "."]);
    git(&repo, &["commit", "-q", "-m", "initial"]);
    fs::write(repo.join("run.log"), "ignored\n").unwrap();

    let tracked: BTreeSet<String> = git(&repo, &["ls-files"]).lines().map(String::from).collect();

    let store = Store::open(tmp.path().join("store")).unwrap();
    let p = store.create_project("g", "", ProjectType::Script).unwrap();
    let url = format!("file://{}", repo.display());
    store.ingest(&p.id, Source::GitUrl(url)).unwrap();
    let files: BTreeSet<String> = file_map(&store.project(&p.id).unwrap().files).into_keys().collect();
    assert_eq!(files, tracked);
    assert!(!store.files_root(&p.id).join(".git").exists());
}

#[test]
fn git_ingest_reports_unreachable_remote() {
    if !have("git", "--version") {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(tmp.path().join("store")).unwrap();
    let p = store.create_project("g", "", ProjectType::Script).unwrap();
    let url = format!("file://{}/missing.git", tmp.path().display());
    let err = store.ingest(&p.id, Source::GitUrl(url)).unwrap_err();
    assert!(matches!(err, Error::Remote(_)), "{err}");
}

/// Serves `routes` (path -> status, content type, body) until dropped.
fn serve(routes: Vec<(&'static str, u16, &'static str, Vec<u8>)>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() {
                continue;
            }
            let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                    break;
                }
            }
            let reply = match routes.iter().find(|(p, ..)| *p == path) {
                Some((_, 302, location, _)) => {
                    format!("HTTP/1.1 302 Found\r\nLocation: {location}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
                        .into_bytes()
                }
                Some((_, status, ctype, body)) => {
                    let mut r = format!(
                        "HTTP/1.1 {status} OK\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        body.len()
                    )
                    .into_bytes();
                    r.extend_from_slice(body);
                    r
                }
                None => b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n".to_vec(),
            };
            let _ = stream.write_all(&reply);
            let _ = stream.flush();
            let mut sink = [0u8; 16];
            let _ = stream.read(&mut sink);
        }
    });
    format!("http://{addr}")
}

#[test]
fn doi_style_download_extracts_zip_after_redirect() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(src.join("code")).unwrap();
    fs::write(src.join("code/run.py"), "print('hi')\n").unwrap();
    fs::write(src.join("data.csv"), "a,b\n1,2\n").unwrap();
    let base = serve(vec![
        ("/record/42", 302, "/files/experiment.zip", Vec::new()),
        ("/files/experiment.zip", 200, "application/zip", zip_dir(&src)),
        ("/landing", 200, "text/html", b"<!DOCTYPE html><html></html>".to_vec()),
        ("/raw/table.csv", 200, "text/csv", b"x,y\n".to_vec()),
    ]);

    let store = Store::open(tmp.path().join("store")).unwrap();
    let p = store.create_project("d", "", ProjectType::Script).unwrap();
    store.ingest(&p.id, Source::DoiUrl(format!("{base}/record/42"))).unwrap();
    let files: BTreeSet<String> = file_map(&store.project(&p.id).unwrap().files).into_keys().collect();
    assert_eq!(files, BTreeSet::from(["code/run.py".to_string(), "data.csv".to_string()]));

    store.ingest(&p.id, Source::DoiUrl(format!("{base}/raw/table.csv"))).unwrap();
    assert_eq!(fs::read(store.files_root(&p.id).join("table.csv")).unwrap(), b"x,y\n");

    let err = store.ingest(&p.id, Source::DoiUrl(format!("{base}/landing"))).unwrap_err();
    assert!(matches!(err, Error::NotSupported(_)), "{err}");
    let err = store.ingest(&p.id, Source::DoiUrl(format!("{base}/gone"))).unwrap_err();
    assert!(matches!(err, Error::Remote(_)), "{err}");
}
