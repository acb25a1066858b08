use std::collections::BTreeMap;
use std::fs;
use std::process::Command;

use reprokit::digest::{changed_entries, tree_digest, EntryDigest};

fn sha256sum_tree(root: &std::path::Path) -> Option<BTreeMap<String, String>> {
    let out = Command::new("sh")
        .arg("-c")
        .arg("find . -type f -print0 | sort -z | xargs -0 sha256sum")
        .current_dir(root)
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    Some(
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| {
                let (hex, path) = l.split_once("  ").unwrap();
                (path.trim_start_matches("./").to_string(), hex.to_string())
            })
            .collect(),
    )
}

#[test]
fn tree_digest_agrees_with_sha256sum() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::create_dir_all(root.join("a/b/c")).unwrap();
    fs::create_dir_all(root.join("empty-dir")).unwrap();
    fs::write(root.join("top.txt"), "hello\n").unwrap();
    fs::write(root.join("empty"), "").unwrap();
    fs::write(root.join("a/b/c/deep.bin"), (0..=255u8).cycle().take(200_000).collect::<Vec<_>>()).unwrap();
    fs::write(root.join("a/with space.txt"), "spaced").unwrap();

    let Some(reference) = sha256sum_tree(root) else {
        eprintln!("sha256sum unavailable; skipping");
        return;
    };
    let ours: BTreeMap<String, String> = tree_digest(root)
        .unwrap()
        .into_iter()
        .map(|(p, d)| (p, d.to_string()))
        .collect();
    assert_eq!(ours, reference);
}

#[test]
fn changes_between_snapshots_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("keep"), "same").unwrap();
    fs::write(root.join("edit"), "old").unwrap();
    fs::write(root.join("gone"), "bye").unwrap();
    let before = tree_digest(root).unwrap();
    fs::write(root.join("edit"), "new").unwrap();
    fs::remove_file(root.join("gone")).unwrap();
    fs::write(root.join("fresh"), "hi").unwrap();
    let after = tree_digest(root).unwrap();

    let changed = changed_entries(&before, &after);
    let keys: Vec<&str> = changed.keys().map(String::as_str).collect();
    assert_eq!(keys, ["edit", "fresh", "gone"]);
    assert_eq!(changed["gone"], EntryDigest::Deleted);
    assert_eq!(changed["edit"], after["edit"]);
}
