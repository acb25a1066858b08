//! Comparison of run pairs.
//!
//! Comparison is byte-exact. Console output means stdout unless stderr is
//! requested; ignore patterns drop whole lines before comparing.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::container::EnvironmentRequest;
use crate::engine::ImageRef;
use crate::error::{Error, Result, Stage};
use crate::runner::{RunPurpose, RunRecord, Runner};
use crate::store::{normalize_rel_path, ProjectId};

/// Maximum number of differing console lines listed in a report.
const CONSOLE_DIFF_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum OutputTarget {
    ConsoleOutput,
    FilePath { path: String },
}

/// Where an experiment's results are. Empty means everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub locations: Vec<OutputTarget>,
}

impl OutputSpec {
    pub fn everything() -> Self {
        OutputSpec::default()
    }

    pub fn files<S: AsRef<str>>(paths: &[S]) -> Result<Self> {
        OutputSpec {
            locations: paths
                .iter()
                .map(|p| OutputTarget::FilePath {
                    path: p.as_ref().to_string(),
                })
                .collect(),
        }
        .normalized()
    }

    /// Normalized paths, sorted and deduplicated.
    pub fn normalized(&self) -> Result<Self> {
        let mut set = BTreeSet::new();
        for loc in &self.locations {
            set.insert(match loc {
                OutputTarget::ConsoleOutput => OutputTarget::ConsoleOutput,
                OutputTarget::FilePath { path } => OutputTarget::FilePath {
                    path: normalize_rel_path(path)?,
                },
            });
        }
        Ok(OutputSpec {
            locations: set.into_iter().collect(),
        })
    }

    fn compares_console(&self) -> bool {
        self.locations.is_empty() || self.locations.contains(&OutputTarget::ConsoleOutput)
    }

    fn file_roots(&self) -> Vec<&str> {
        self.locations
            .iter()
            .filter_map(|l| match l {
                OutputTarget::FilePath { path } => Some(path.as_str()),
                OutputTarget::ConsoleOutput => None,
            })
            .collect()
    }

    fn covers_path(&self, path: &str) -> bool {
        if self.locations.is_empty() {
            return true;
        }
        self.file_roots().iter().any(|root| {
            path == *root || (path.starts_with(root) && path.as_bytes().get(root.len()) == Some(&b'/'))
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    pub include_stderr: bool,
    /// Console lines matching any of these are dropped before comparing.
    pub ignore_line_patterns: Vec<Regex>,
}

impl CompareOptions {
    pub fn with_ignore_patterns<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let ignore_line_patterns = patterns
            .iter()
            .map(|p| Regex::new(p.as_ref()).map_err(|e| Error::validation(format!("ignore pattern {:?}: {e}", p.as_ref()))))
            .collect::<Result<_>>()?;
        Ok(CompareOptions {
            include_stderr: false,
            ignore_line_patterns,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Verdict {
    Reproduced,
    NotReproduced,
    ReplicationDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DiffStatus {
    OnlyInA,
    OnlyInB,
    DigestMismatch,
}

impl DiffStatus {
    fn mirrored(self) -> Self {
        match self {
            DiffStatus::OnlyInA => DiffStatus::OnlyInB,
            DiffStatus::OnlyInB => DiffStatus::OnlyInA,
            DiffStatus::DigestMismatch => DiffStatus::DigestMismatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileDiff {
    pub path: String,
    pub status: DiffStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsoleLineDiff {
    /// One-based line number.
    pub line: usize,
    pub a: Option<String>,
    pub b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub console_match: bool,
    pub console_compared: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub console_diff: Vec<ConsoleLineDiff>,
    pub file_diffs: Vec<FileDiff>,
    pub runs: (String, String),
    pub compared: OutputSpec,
}

impl VerificationReport {
    /// The same report with A and B swapped.
    pub fn mirrored(&self) -> Self {
        VerificationReport {
            console_diff: self
                .console_diff
                .iter()
                .map(|d| ConsoleLineDiff {
                    line: d.line,
                    a: d.b.clone(),
                    b: d.a.clone(),
                })
                .collect(),
            file_diffs: self
                .file_diffs
                .iter()
                .map(|d| FileDiff {
                    path: d.path.clone(),
                    status: d.status.mirrored(),
                })
                .collect(),
            runs: (self.runs.1.clone(), self.runs.0.clone()),
            ..self.clone()
        }
    }
}

fn console_text(run: &RunRecord, opts: &CompareOptions) -> Vec<u8> {
    let mut bytes = run.outcome.stdout.as_bytes().to_vec();
    if opts.include_stderr {
        bytes.extend_from_slice(run.outcome.stderr.as_bytes());
    }
    if opts.ignore_line_patterns.is_empty() {
        return bytes;
    }
    let mut kept = Vec::with_capacity(bytes.len());
    for line in bytes.split_inclusive(|b| *b == b'\n') {
        let text = String::from_utf8_lossy(line);
        if !opts.ignore_line_patterns.iter().any(|re| re.is_match(text.trim_end_matches('\n'))) {
            kept.extend_from_slice(line);
        }
    }
    kept
}

fn console_diff(a: &[u8], b: &[u8]) -> Vec<ConsoleLineDiff> {
    let la: Vec<&[u8]> = a.split_inclusive(|c| *c == b'\n').collect();
    let lb: Vec<&[u8]> = b.split_inclusive(|c| *c == b'\n').collect();
    let text = |l: Option<&&[u8]>| l.map(|l| String::from_utf8_lossy(l).trim_end_matches('\n').to_string());
    (0..la.len().max(lb.len()))
        .filter(|&i| la.get(i) != lb.get(i))
        .take(CONSOLE_DIFF_LIMIT)
        .map(|i| ConsoleLineDiff {
            line: i + 1,
            a: text(la.get(i)),
            b: text(lb.get(i)),
        })
        .collect()
}

/// Compare two recorded runs of the same project without re-executing.
pub fn compare_runs(
    a: &RunRecord,
    b: &RunRecord,
    output_spec: Option<&OutputSpec>,
    opts: &CompareOptions,
) -> Result<VerificationReport> {
    if a.project_id != b.project_id {
        return Err(Error::validation(format!(
            "runs {} and {} belong to different projects",
            a.run_id, b.run_id
        )));
    }
    let spec = output_spec.cloned().unwrap_or_default().normalized()?;

    let console_compared = spec.compares_console();
    let (console_match, diff) = if console_compared {
        let (ca, cb) = (console_text(a, opts), console_text(b, opts));
        if ca == cb {
            (true, Vec::new())
        } else {
            (false, console_diff(&ca, &cb))
        }
    } else {
        (true, Vec::new())
    };

    let (fa, fb) = (&a.outcome.changed_files, &b.outcome.changed_files);
    let paths: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    let file_diffs = paths
        .into_iter()
        .filter(|p| spec.covers_path(p))
        .filter_map(|p| {
            let status = match (fa.get(p), fb.get(p)) {
                (Some(x), Some(y)) if x == y => return None,
                (Some(_), Some(_)) => DiffStatus::DigestMismatch,
                (Some(_), None) => DiffStatus::OnlyInA,
                (None, _) => DiffStatus::OnlyInB,
            };
            Some(FileDiff {
                path: p.clone(),
                status,
            })
        })
        .collect::<Vec<_>>();

    let verdict = if a.dataset_id != b.dataset_id {
        Verdict::ReplicationDiff
    } else if console_match && file_diffs.is_empty() {
        Verdict::Reproduced
    } else {
        Verdict::NotReproduced
    };
    Ok(VerificationReport {
        verdict,
        console_match,
        console_compared,
        console_diff: diff,
        file_diffs,
        runs: (a.run_id.clone(), b.run_id.clone()),
        compared: spec,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerifiedPair {
    pub first: RunRecord,
    pub second: RunRecord,
    pub report: VerificationReport,
}

/// Run `command` twice on the same image and dataset and compare.
#[allow(clippy::too_many_arguments)]
pub fn verify_reproducibility(
    runner: &Runner,
    project: &ProjectId,
    tag_id: u64,
    command: &str,
    dataset_id: Option<&str>,
    output_spec: Option<&OutputSpec>,
    opts: &CompareOptions,
) -> Result<VerifiedPair> {
    double_run(runner, project, tag_id, command, dataset_id, output_spec, opts, RunPurpose::VerifyPair)
}

#[allow(clippy::too_many_arguments)]
fn double_run(
    runner: &Runner,
    project: &ProjectId,
    tag_id: u64,
    command: &str,
    dataset_id: Option<&str>,
    output_spec: Option<&OutputSpec>,
    opts: &CompareOptions,
    purpose: RunPurpose,
) -> Result<VerifiedPair> {
    if let Some(spec) = output_spec {
        spec.normalized()?;
    }
    let first = runner
        .execute(project, tag_id, command, dataset_id, purpose)
        .map_err(|e| e.in_stage(Stage::Run))?;
    let second = runner
        .execute(project, tag_id, command, dataset_id, purpose)
        .map_err(|e| e.in_stage(Stage::Run))?;
    let report = compare_runs(&first, &second, output_spec, opts).map_err(|e| e.in_stage(Stage::Verify))?;
    Ok(VerifiedPair { first, second, report })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Configured {
    pub image: ImageRef,
    pub dockerfile: String,
    #[serde(flatten)]
    pub pair: VerifiedPair,
}

/// Build the environment, then run `command` twice and compare.
pub fn configure_and_double_run(
    runner: &Runner,
    project: &ProjectId,
    request: &EnvironmentRequest,
    command: &str,
    output_spec: Option<&OutputSpec>,
    opts: &CompareOptions,
) -> Result<Configured> {
    if command.trim().is_empty() {
        return Err(Error::validation("command must not be empty"));
    }
    let built = runner.build_environment(project, request)?;
    let pair = double_run(
        runner,
        project,
        built.image.tag_id,
        command,
        None,
        output_spec,
        opts,
        RunPurpose::Configure,
    )?;
    Ok(Configured {
        image: built.image,
        dockerfile: built.dockerfile,
        pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::{DigestTree, EntryDigest};
    use crate::engine::{ConsoleBytes, RunOutcome};
    use proptest::prelude::*;

    fn record(id: &str, stdout: &str, files: &[(&str, &str)]) -> RunRecord {
        let changed_files: DigestTree = files
            .iter()
            .map(|(p, d)| (p.to_string(), EntryDigest::Content(d.to_string())))
            .collect();
        RunRecord {
            run_id: id.into(),
            project_id: ProjectId::parse("p1").unwrap(),
            image: ImageRef {
                tag_id: 1,
                engine_tag: "reprokit-p1:1".into(),
                spec_digest: "x".into(),
            },
            command: "true".into(),
            dataset_id: None,
            outcome: RunOutcome {
                stdout: ConsoleBytes(stdout.as_bytes().to_vec()),
                stderr: ConsoleBytes::default(),
                exit_code: 0,
                changed_files,
                duration: 0.0,
                stdout_truncated: false,
                stderr_truncated: false,
            },
            started_at: chrono::Utc::now(),
            purpose: RunPurpose::Manual,
        }
    }

    #[test]
    fn identical_runs_reproduce() {
        let a = record("a", "x\n", &[("out.csv", "1")]);
        let b = record("b", "x\n", &[("out.csv", "1")]);
        let r = compare_runs(&a, &b, None, &CompareOptions::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Reproduced);
        assert!(r.file_diffs.is_empty());
        assert!(r.console_compared);
    }

    #[test]
    fn one_byte_console_difference() {
        let a = record("a", "t=1\n", &[]);
        let b = record("b", "t=2\n", &[]);
        let r = compare_runs(&a, &b, None, &CompareOptions::default()).unwrap();
        assert_eq!(r.verdict, Verdict::NotReproduced);
        assert!(!r.console_match);
        assert_eq!(r.console_diff[0].line, 1);
        assert_eq!(r.console_diff[0].a.as_deref(), Some("t=1"));
    }

    #[test]
    fn output_spec_restricts_files() {
        let a = record("a", "", &[("results/out.csv", "1"), ("log.txt", "a")]);
        let b = record("b", "", &[("results/out.csv", "1"), ("log.txt", "b")]);
        let spec = OutputSpec::files(&["results/out.csv"]).unwrap();
        let r = compare_runs(&a, &b, Some(&spec), &CompareOptions::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Reproduced);
        assert!(!r.console_compared);
        let all = compare_runs(&a, &b, None, &CompareOptions::default()).unwrap();
        assert_eq!(all.file_diffs, vec![FileDiff { path: "log.txt".into(), status: DiffStatus::DigestMismatch }]);
    }

    #[test]
    fn folder_paths_cover_descendants() {
        let spec = OutputSpec::files(&["results"]).unwrap();
        assert!(spec.covers_path("results/a.csv"));
        assert!(!spec.covers_path("results2/a.csv"));
    }

    #[test]
    fn ignore_patterns_and_stderr() {
        let a = record("a", "value 3\ntime 10:01\n", &[]);
        let mut b = record("b", "value 3\ntime 10:02\n", &[]);
        let opts = CompareOptions::with_ignore_patterns(&["^time "]).unwrap();
        assert_eq!(compare_runs(&a, &b, None, &opts).unwrap().verdict, Verdict::Reproduced);
        b.outcome.stderr = ConsoleBytes(b"warning".to_vec());
        let with_err = CompareOptions {
            include_stderr: true,
            ..opts.clone()
        };
        assert_eq!(compare_runs(&a, &b, None, &with_err).unwrap().verdict, Verdict::NotReproduced);
        assert_eq!(compare_runs(&a, &b, None, &opts).unwrap().verdict, Verdict::Reproduced);
    }

    #[test]
    fn different_datasets_are_replication_diffs() {
        let a = record("a", "x", &[]);
        let mut b = record("b", "x", &[]);
        b.dataset_id = Some("other".into());
        assert_eq!(
            compare_runs(&a, &b, None, &CompareOptions::default()).unwrap().verdict,
            Verdict::ReplicationDiff
        );
    }

    #[test]
    fn different_projects_rejected() {
        let a = record("a", "x", &[]);
        let mut b = record("b", "x", &[]);
        b.project_id = ProjectId::parse("p2").unwrap();
        assert!(compare_runs(&a, &b, None, &CompareOptions::default()).is_err());
    }

    #[test]
    fn deletions_compare_as_entries() {
        let mut a = record("a", "", &[]);
        let b = record("b", "", &[]);
        a.outcome.changed_files.insert("gone".into(), EntryDigest::Deleted);
        let r = compare_runs(&a, &b, None, &CompareOptions::default()).unwrap();
        assert_eq!(r.file_diffs[0].status, DiffStatus::OnlyInA);
    }

    fn arb_files() -> impl Strategy<Value = Vec<(String, String)>> {
        proptest::collection::vec(("[abc]{1,2}(/[xy])?", "[01]"), 0..6)
    }

    fn build(id: &str, stdout: &str, files: &[(String, String)]) -> RunRecord {
        let refs: Vec<(&str, &str)> = files.iter().map(|(p, d)| (p.as_str(), d.as_str())).collect();
        record(id, stdout, &refs)
    }

    fn arb_spec() -> impl Strategy<Value = Vec<OutputTarget>> {
        proptest::collection::vec(
            prop_oneof![
                Just(OutputTarget::ConsoleOutput),
                "[abc]{1,2}(/[xy])?".prop_map(|path| OutputTarget::FilePath { path }),
            ],
            1..5,
        )
    }

    proptest! {
        #[test]
        fn classification_is_symmetric(
            sa in "[ab]{0,3}", sb in "[ab]{0,3}",
            fa in arb_files(), fb in arb_files(),
            spec in proptest::option::of(arb_spec()),
        ) {
            let a = build("a", &sa, &fa);
            let b = build("b", &sb, &fb);
            let spec = spec.map(|locations| OutputSpec { locations });
            let opts = CompareOptions::default();
            let ab = compare_runs(&a, &b, spec.as_ref(), &opts).unwrap();
            let ba = compare_runs(&b, &a, spec.as_ref(), &opts).unwrap();
            prop_assert_eq!(ab.verdict, ba.verdict);
            prop_assert_eq!(ab.mirrored(), ba);
        }

        #[test]
        fn shrinking_spec_keeps_reproduced(
            sa in "[ab]{0,3}", sb in "[ab]{0,3}",
            fa in arb_files(), fb in arb_files(),
            spec in arb_spec(),
            keep in proptest::collection::vec(any::<bool>(), 5),
        ) {
            let a = build("a", &sa, &fa);
            let b = build("b", &sb, &fb);
            let opts = CompareOptions::default();
            let full = OutputSpec { locations: spec.clone() };
            let mut sub: Vec<OutputTarget> = spec
                .iter()
                .zip(keep.iter())
                .filter(|(_, k)| **k)
                .map(|(t, _)| t.clone())
                .collect();
            // an empty spec means "everything", so a shrunk spec keeps one target
            if sub.is_empty() {
                sub.push(spec[0].clone());
            }
            let before = compare_runs(&a, &b, Some(&full), &opts).unwrap().verdict;
            let after = compare_runs(&a, &b, Some(&OutputSpec { locations: sub }), &opts).unwrap().verdict;
            if before == Verdict::Reproduced {
                prop_assert_eq!(after, Verdict::Reproduced);
            }
        }

        #[test]
        fn everything_spec_is_the_widest(
            sa in "[ab]{0,3}", sb in "[ab]{0,3}",
            fa in arb_files(), fb in arb_files(),
            spec in arb_spec(),
        ) {
            let a = build("a", &sa, &fa);
            let b = build("b", &sb, &fb);
            let opts = CompareOptions::default();
            if compare_runs(&a, &b, None, &opts).unwrap().verdict == Verdict::Reproduced {
                let narrowed = compare_runs(&a, &b, Some(&OutputSpec { locations: spec }), &opts).unwrap();
                prop_assert_eq!(narrowed.verdict, Verdict::Reproduced);
            }
        }
    }
}
