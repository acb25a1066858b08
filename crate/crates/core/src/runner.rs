//! Builds environments for stored projects and executes runs against them.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::container::{plan_environment_with, Credentials, DatabaseEngine, EnvironmentPlan, EnvironmentRequest, SpecOptions, FILES_DIR};
use crate::engine::{self, Attachments, DatasetMount, EngineDriver, ImageRef, RunOutcome, EXTERNAL_DATASET_MOUNT};
use crate::error::{Error, Result, Stage};
use crate::store::{atomic_write, DatasetRef, Project, ProjectId, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RunPurpose {
    Configure,
    Manual,
    VerifyPair,
    Replication,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub run_id: String,
    pub project_id: ProjectId,
    pub image: ImageRef,
    pub command: String,
    pub dataset_id: Option<String>,
    pub outcome: RunOutcome,
    pub started_at: DateTime<Utc>,
    pub purpose: RunPurpose,
}

/// Result of building a project environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BuiltEnvironment {
    pub image: ImageRef,
    pub dockerfile: String,
    #[serde(skip)]
    pub plan: Option<EnvironmentPlan>,
}

pub struct Runner {
    store: Arc<Store>,
    driver: Arc<dyn EngineDriver>,
    run_locks: Mutex<HashMap<ProjectId, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner")
            .field("store", &self.store)
            .field("driver", &self.driver.name())
            .finish()
    }
}

impl Runner {
    pub fn new(store: Arc<Store>, driver: Arc<dyn EngineDriver>) -> Self {
        Runner {
            store,
            driver,
            run_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn driver(&self) -> &dyn EngineDriver {
        self.driver.as_ref()
    }

    /// Fill request fields the project already knows about.
    pub fn complete_request(project: &Project, request: &EnvironmentRequest) -> EnvironmentRequest {
        let mut req = request.clone();
        if req.project_type.is_none() {
            req.project_type = Some(project.project_type);
        }
        if req.seeds.is_empty() {
            req.seeds = project.seeds.clone();
        }
        if let Some(db) = &mut req.database {
            if db.credentials.is_none() && db.engine != DatabaseEngine::SQLite {
                db.credentials = Some(Credentials::generate());
            }
        }
        req
    }

    /// Generate the project's plan without building it.
    pub fn plan(&self, id: &ProjectId, request: &EnvironmentRequest) -> Result<EnvironmentPlan> {
        let project = self.store.project(id)?;
        let req = Self::complete_request(&project, request);
        let opts = SpecOptions {
            project_tree: Some(&project.files),
            ..SpecOptions::default()
        };
        plan_environment_with(&req, id, &opts)
    }

    /// Generate the Dockerfile, record it under `environment/`, and build it.
    pub fn build_environment(&self, id: &ProjectId, request: &EnvironmentRequest) -> Result<BuiltEnvironment> {
        let plan = self.plan(id, request).map_err(|e| e.in_stage(Stage::Spec))?;
        let dockerfile = plan.main_spec.render();
        let env_dir = self.store.project_dir(id).join("environment");
        std::fs::create_dir_all(&env_dir).map_err(Error::at_path(&env_dir))?;
        atomic_write(&env_dir.join("Dockerfile"), dockerfile.as_bytes())?;
        let mut plan_json = serde_json::to_vec_pretty(&plan).expect("plan serializes");
        plan_json.push(b'\n');
        atomic_write(&env_dir.join("plan.json"), &plan_json)?;

        let built = (|| {
            self.driver.check_available()?;
            engine::build_image(self.driver.as_ref(), &self.store, id, &plan, &self.store.project_dir(id))
        })()
        .map_err(|e| e.in_stage(Stage::Build))?;
        Ok(BuiltEnvironment {
            image: built,
            dockerfile,
            plan: Some(plan),
        })
    }

    fn run_lock(&self, id: &ProjectId) -> Arc<Mutex<()>> {
        let mut locks = self.run_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.clone()).or_default().clone()
    }

    /// Execute `command` on image `tag_id`. `dataset_id` selects a dataset
    /// other than the active one, which marks the run as a replication.
    pub fn execute(
        &self,
        id: &ProjectId,
        tag_id: u64,
        command: &str,
        dataset_id: Option<&str>,
        purpose: RunPurpose,
    ) -> Result<RunRecord> {
        if command.trim().is_empty() {
            return Err(Error::validation("command must not be empty"));
        }
        let lock = self.run_lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        let project = self.store.project(id)?;
        let record = engine::image_record(&self.store, id, tag_id)?;
        let dataset = match dataset_id {
            None => project.dataset.clone(),
            Some(want) => Some(
                project
                    .dataset_by_id(want)
                    .cloned()
                    .ok_or_else(|| Error::not_found(format!("dataset {want}")))?,
            ),
        };
        let purpose = match (dataset_id, &project.dataset) {
            (Some(want), Some(active)) if want != active.id => RunPurpose::Replication,
            (Some(_), None) => RunPurpose::Replication,
            _ => purpose,
        };
        let attachments = Attachments {
            dataset: dataset.as_ref().map(dataset_mount),
            sidecars: record.plan.sidecars.clone(),
            network: (!record.plan.sidecars.is_empty()).then(|| record.plan.network_name.clone()),
            env: record.plan.connection_env.clone(),
            files_root: Some(self.store.files_root(id)),
        };
        let started_at = Utc::now();
        let outcome = engine::run(self.driver.as_ref(), &self.store, id, tag_id, command, &attachments)?;
        let run = RunRecord {
            run_id: uuid::Uuid::new_v4().to_string(),
            project_id: id.clone(),
            image: record.image,
            command: command.to_string(),
            dataset_id: dataset.map(|d| d.id),
            outcome,
            started_at,
            purpose,
        };
        self.store.put_record(id, "runs", &run.run_id, &run, true)?;
        Ok(run)
    }

    pub fn get_run(&self, id: &ProjectId, run_id: &str) -> Result<RunRecord> {
        self.store.project(id)?;
        let key = uuid::Uuid::parse_str(run_id).map_err(|_| Error::not_found(format!("run {run_id}")))?;
        self.store
            .get_record(id, "runs", &key.to_string())?
            .ok_or_else(|| Error::not_found(format!("run {run_id}")))
    }

    /// Run history in execution order.
    pub fn list_runs(&self, id: &ProjectId) -> Result<Vec<RunRecord>> {
        self.store.project(id)?;
        let mut runs: Vec<RunRecord> = self.store.list_records(id, "runs")?;
        runs.sort_by(|a, b| a.started_at.cmp(&b.started_at).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(runs)
    }
}

fn dataset_mount(dataset: &DatasetRef) -> DatasetMount {
    if dataset.external {
        DatasetMount {
            host_path: Some(PathBuf::from(&dataset.root)),
            container_path: EXTERNAL_DATASET_MOUNT.to_string(),
        }
    } else {
        DatasetMount {
            host_path: None,
            container_path: format!("{FILES_DIR}/{}", dataset.root),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SandboxDriver;
    use crate::store::{ProjectType, Source};

    fn setup(files: &[(&str, &str)]) -> (tempfile::TempDir, Runner, ProjectId) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
        let driver = Arc::new(SandboxDriver::new(dir.path().join("sandbox")));
        let runner = Runner::new(store.clone(), driver);
        let project = store.create_project("t", "", ProjectType::Script).unwrap();
        let src = dir.path().join("src");
        for (p, body) in files {
            let path = src.join(p);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(path, body).unwrap();
        }
        store.ingest(&project.id, Source::LocalDir(src)).unwrap();
        (dir, runner, project.id)
    }

    fn shell_request() -> EnvironmentRequest {
        EnvironmentRequest {
            languages: vec!["shell".into()],
            ..Default::default()
        }
    }

    #[test]
    fn build_then_execute_persists_record() {
        let (_dir, runner, id) = setup(&[("run.sh", "echo hi > out.txt; echo done")]);
        let built = runner.build_environment(&id, &shell_request()).unwrap();
        assert!(built.dockerfile.starts_with("FROM ubuntu:20.04\n"));
        let run = runner
            .execute(&id, built.image.tag_id, "sh run.sh", None, RunPurpose::Manual)
            .unwrap();
        assert_eq!(run.outcome.stdout.as_bytes(), b"done\n");
        assert!(run.outcome.changed_files.contains_key("out.txt"));
        assert_eq!(runner.get_run(&id, &run.run_id).unwrap(), run);
        assert_eq!(runner.list_runs(&id).unwrap().len(), 1);
    }

    #[test]
    fn empty_command_and_unknown_tag_fail() {
        let (_dir, runner, id) = setup(&[("a.sh", "")]);
        assert!(matches!(
            runner.execute(&id, 1, "  ", None, RunPurpose::Manual),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            runner.execute(&id, 999, "true", None, RunPurpose::Manual),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn dataset_override_is_replication() {
        let (_dir, runner, id) = setup(&[("a/x.txt", "A"), ("b/x.txt", "B")]);
        let store = runner.store().clone();
        let first = store.set_dataset(&id, DatasetRef::new("a", "A")).unwrap().dataset.unwrap();
        let second = store.set_dataset(&id, DatasetRef::new("b", "B")).unwrap().dataset.unwrap();
        let tag = runner.build_environment(&id, &shell_request()).unwrap().image.tag_id;
        let cmd = "cat \"$DATASET_DIR/x.txt\"";
        let active = runner.execute(&id, tag, cmd, None, RunPurpose::Manual).unwrap();
        assert_eq!(active.outcome.stdout.as_bytes(), b"B");
        assert_eq!(active.purpose, RunPurpose::Manual);
        let replay = runner.execute(&id, tag, cmd, Some(&first.id), RunPurpose::Manual).unwrap();
        assert_eq!(replay.outcome.stdout.as_bytes(), b"A");
        assert_eq!(replay.purpose, RunPurpose::Replication);
        assert_eq!(replay.dataset_id.as_deref(), Some(first.id.as_str()));
        assert_ne!(first.id, second.id);
    }

    #[test]
    fn spec_errors_are_stage_tagged() {
        let (_dir, runner, id) = setup(&[("a.sh", "")]);
        let err = runner.build_environment(&id, &EnvironmentRequest::default()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: Stage::Spec, .. }));
    }

    #[test]
    fn tags_of_other_projects_are_rejected() {
        let (_dir, runner, id) = setup(&[("a.sh", "")]);
        let other = runner.store().create_project("o", "", ProjectType::Script).unwrap();
        let tag = runner.build_environment(&id, &shell_request()).unwrap().image.tag_id;
        assert!(matches!(
            runner.execute(&other.id, tag, "true", None, RunPurpose::Manual),
            Err(Error::NotFound(_))
        ));
    }
}
