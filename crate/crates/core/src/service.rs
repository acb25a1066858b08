//! Operations shared by the CLI, the HTTP service and the C API.
//!
//! Request and response types use the camelCase field names of the JSON
//! payloads; the CLI's `--json` output is the serialized response.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container::{generate_spec, EnvironmentRequest};
use crate::deps::{build_graph, detect_requirements_file, emit_requirements, externals_by_language, PackageReq};
use crate::engine::{DockerDriver, EngineDriver, SandboxDriver};
use crate::error::{Error, Stage};
use crate::language::{infer_languages, Language, LanguageProfile};
use crate::package::{build_package, verify_package, zip_package, PackageManifest, PackageOptions};
use crate::runner::{RunPurpose, RunRecord, Runner};
use crate::store::{DatasetRef, EntryAction, FileNode, Project, ProjectId, ProjectType, SeedDecl, Source, Store};
use crate::verify::{compare_runs, configure_and_double_run, verify_reproducibility, CompareOptions, OutputSpec, VerificationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApiErrorCode {
    NotFound,
    Validation,
    EngineFailure,
    StageFailure,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ApiError {
    pub code: ApiErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Engine log excerpt or offending paths, when available.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl ApiError {
    pub fn validation(message: impl Into<String>) -> Self {
        Error::validation(message).into()
    }

    pub fn http_status(&self) -> u16 {
        match self.code {
            ApiErrorCode::NotFound => 404,
            ApiErrorCode::Validation => 422,
            ApiErrorCode::EngineFailure => 502,
            ApiErrorCode::StageFailure | ApiErrorCode::Storage => 500,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.code {
            ApiErrorCode::NotFound | ApiErrorCode::Validation => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ApiError {}

fn code_of(err: &Error) -> ApiErrorCode {
    match err {
        Error::NotFound(_) => ApiErrorCode::NotFound,
        Error::Validation(_)
        | Error::AlreadyExists(_)
        | Error::PathTraversal(_)
        | Error::NotSupported(_)
        | Error::Integrity { .. }
        | Error::Remote(_) => ApiErrorCode::Validation,
        Error::Engine { .. } => ApiErrorCode::EngineFailure,
        Error::Io { .. } | Error::Metadata { .. } => ApiErrorCode::Storage,
        Error::Stage { source, .. } => match code_of(source) {
            c @ (ApiErrorCode::NotFound | ApiErrorCode::Validation) => c,
            _ => ApiErrorCode::StageFailure,
        },
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let stage = match &err {
            Error::Stage { stage, .. } => Some(stage.as_str().to_string()),
            _ => None,
        };
        let details = match err.root() {
            Error::Engine { log, .. } if !log.is_empty() => {
                crate::engine::log_excerpt(log, 20).lines().map(String::from).collect()
            }
            Error::Integrity { paths, .. } => paths.clone(),
            _ => Vec::new(),
        };
        ApiError {
            code: code_of(&err),
            message: err.to_string(),
            stage,
            details,
        }
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    Docker,
    Podman,
    Sandbox,
}

impl std::str::FromStr for DriverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "docker" => Ok(DriverKind::Docker),
            "podman" => Ok(DriverKind::Podman),
            "sandbox" => Ok(DriverKind::Sandbox),
            other => Err(Error::validation(format!(
                "unknown driver {other:?} (expected docker, podman or sandbox)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub driver: DriverKind,
    /// Engine CLI for the docker and podman drivers.
    pub engine_cli: Option<PathBuf>,
    /// Working root of the sandbox driver; defaults to `<store>/.sandbox`.
    pub sandbox_dir: Option<PathBuf>,
    /// Directories prepended to `PATH` inside the sandbox.
    pub sandbox_path: Vec<PathBuf>,
}

impl ServiceConfig {
    pub fn new(store: impl Into<PathBuf>, driver: DriverKind) -> Self {
        ServiceConfig {
            store: store.into(),
            driver,
            engine_cli: None,
            sandbox_dir: None,
            sandbox_path: Vec::new(),
        }
    }

    pub fn sandbox_root(&self) -> PathBuf {
        self.sandbox_dir.clone().unwrap_or_else(|| self.store.join(".sandbox"))
    }

    pub fn make_driver(&self) -> Arc<dyn EngineDriver> {
        match self.driver {
            DriverKind::Docker | DriverKind::Podman => {
                let default = if self.driver == DriverKind::Docker { "docker" } else { "podman" };
                let cli = self.engine_cli.clone().unwrap_or_else(|| PathBuf::from(default));
                Arc::new(DockerDriver::new(cli))
            }
            DriverKind::Sandbox => {
                Arc::new(SandboxDriver::new(self.sandbox_root()).with_extra_path(self.sandbox_path.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CreateProjectRequest {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_type")]
    pub project_type: ProjectType,
}

fn default_type() -> ProjectType {
    ProjectType::Script
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FilesResponse {
    pub project_id: ProjectId,
    /// Entries that came from the upload.
    pub files: Vec<FileNode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EntryResponse {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<FileNode>,
    pub deleted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InferResponse {
    pub profile: LanguageProfile,
    pub dependencies: BTreeMap<Language, Vec<PackageReq>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requirements_file: Option<String>,
    /// Generated `requirements.txt` content, when the tree has none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_requirements: Option<String>,
    pub warnings: Vec<String>,
    /// Starting point for an environment request.
    pub suggested_request: EnvironmentRequest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvironmentResponse {
    pub tag_id: u64,
    pub engine_tag: String,
    pub spec_digest: String,
    pub dockerfile: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRequest {
    pub command: String,
    pub tag_id: u64,
    #[serde(default)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompareSettings {
    #[serde(default)]
    pub outputs: Option<OutputSpec>,
    #[serde(default)]
    pub include_stderr: bool,
    #[serde(default)]
    pub ignore_line_patterns: Vec<String>,
}

impl CompareSettings {
    fn options(&self) -> ApiResult<CompareOptions> {
        let mut opts = CompareOptions::with_ignore_patterns(&self.ignore_line_patterns)?;
        opts.include_stderr = self.include_stderr;
        Ok(opts)
    }
}

/// Either two fresh runs (`tagId` + `command`) or two stored runs (`runs`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerifyRequest {
    #[serde(default)]
    pub tag_id: Option<u64>,
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub runs: Option<(String, String)>,
    #[serde(flatten)]
    pub compare: CompareSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerifyResponse {
    pub report: VerificationReport,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfigureRequest {
    #[serde(flatten)]
    pub environment: EnvironmentRequest,
    pub command: String,
    #[serde(flatten)]
    pub compare: CompareSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfigureResponse {
    pub environment: EnvironmentResponse,
    pub report: VerificationReport,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackageRequest {
    pub tag_id: u64,
    /// Defaults to the distinct commands already run on the image.
    #[serde(default)]
    pub commands: Vec<String>,
    /// Defaults to a fresh directory under the project.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub embed_image: bool,
    #[serde(default)]
    pub zip: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackageResponse {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zip: Option<PathBuf>,
    pub manifest: PackageManifest,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetRequest {
    pub root: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub external: bool,
    /// Reactivate a dataset from the project's history instead.
    #[serde(default)]
    pub id: Option<String>,
}

/// Where uploaded files come from.
#[derive(Debug, Clone)]
pub enum Upload {
    Path(PathBuf),
    Url(String),
    ZipBytes(Vec<u8>),
}

impl Upload {
    fn into_source(self) -> ApiResult<Source> {
        Ok(match self {
            Upload::Path(p) if p.is_dir() => Source::LocalDir(p),
            Upload::Path(p) if p.is_file() => Source::ZipArchive(p),
            Upload::Path(p) => return Err(Error::not_found(format!("upload source {}", p.display())).into()),
            Upload::Url(u) => url_source(&u)?,
            Upload::ZipBytes(b) => Source::ZipBytes(b),
        })
    }
}

fn url_source(url: &str) -> ApiResult<Source> {
    let u = url.trim();
    let lower = u.to_ascii_lowercase();
    if lower.starts_with("doi:") || lower.starts_with("10.") || lower.contains("doi.org/") {
        Ok(Source::DoiUrl(u.to_string()))
    } else if lower.ends_with(".git") || lower.starts_with("git@") || lower.starts_with("git://") || lower.starts_with("file://") {
        Ok(Source::GitUrl(u.to_string()))
    } else if lower.starts_with("http://") || lower.starts_with("https://") {
        if lower.contains("github.com/") || lower.contains("gitlab.com/") || lower.contains("bitbucket.org/") {
            Ok(Source::GitUrl(u.to_string()))
        } else {
            Ok(Source::DoiUrl(u.to_string()))
        }
    } else {
        Err(ApiError::validation(format!("unsupported source URL {u:?}")))
    }
}

fn pid(id: &str) -> ApiResult<ProjectId> {
    Ok(ProjectId::parse(id)?)
}

pub struct Service {
    store: Arc<Store>,
    runner: Runner,
    config: ServiceConfig,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("config", &self.config).finish()
    }
}

impl Service {
    pub fn open(config: ServiceConfig) -> ApiResult<Self> {
        let store = Arc::new(Store::open(&config.store)?);
        let runner = Runner::new(store.clone(), config.make_driver());
        Ok(Service { store, runner, config })
    }

    pub fn with_driver(config: ServiceConfig, driver: Arc<dyn EngineDriver>) -> ApiResult<Self> {
        let store = Arc::new(Store::open(&config.store)?);
        let runner = Runner::new(store.clone(), driver);
        Ok(Service { store, runner, config })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn runner(&self) -> &Runner {
        &self.runner
    }

    pub fn create_project(&self, req: &CreateProjectRequest) -> ApiResult<Project> {
        Ok(self.store.create_project(&req.name, &req.description, req.project_type)?)
    }

    pub fn project(&self, id: &str) -> ApiResult<Project> {
        Ok(self.store.project(&pid(id)?)?)
    }

    pub fn list_projects(&self) -> ApiResult<Vec<Project>> {
        Ok(self.store.list_projects()?)
    }

    pub fn add_files(&self, id: &str, upload: Upload) -> ApiResult<FilesResponse> {
        let project_id = pid(id)?;
        let files = self.store.ingest(&project_id, upload.into_source()?)?;
        Ok(FilesResponse { project_id, files })
    }

    pub fn modify_entry(&self, id: &str, path: &str, action: EntryAction) -> ApiResult<EntryResponse> {
        let deleted = matches!(action, EntryAction::Delete);
        let entry = self.store.modify_entry(&pid(id)?, path, action)?;
        Ok(EntryResponse {
            path: crate::store::normalize_rel_path(path)?,
            entry,
            deleted,
        })
    }

    pub fn set_dataset(&self, id: &str, req: &DatasetRequest) -> ApiResult<Project> {
        let project_id = pid(id)?;
        let dataset = match &req.id {
            Some(existing) => {
                let project = self.store.project(&project_id)?;
                project
                    .dataset_by_id(existing)
                    .cloned()
                    .ok_or_else(|| Error::not_found(format!("dataset {existing}")))?
            }
            None if req.external => DatasetRef::external(&req.root, &req.label),
            None => DatasetRef::new(&req.root, &req.label),
        };
        Ok(self.store.set_dataset(&project_id, dataset)?)
    }

    pub fn declare_seeds(&self, id: &str, seeds: Vec<SeedDecl>) -> ApiResult<Project> {
        Ok(self.store.declare_seeds(&pid(id)?, seeds)?)
    }

    /// Infer languages and dependencies; with `write_requirements`, a
    /// generated `requirements.txt` is added to a tree that has none.
    pub fn infer(&self, id: &str, write_requirements: bool) -> ApiResult<InferResponse> {
        let project_id = pid(id)?;
        let project = self.store.project(&project_id)?;
        let profile = infer_languages(&project.files);
        let root = self.store.files_root(&project_id);
        let mut graphs = Vec::new();
        let mut warnings = Vec::new();
        for lang in &profile.languages {
            match build_graph(&root, &project.files, *lang) {
                Ok(g) => {
                    warnings.extend(g.warnings.iter().cloned());
                    graphs.push(g);
                }
                Err(Error::NotSupported(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let dependencies: BTreeMap<Language, Vec<PackageReq>> = externals_by_language(&graphs)
            .into_iter()
            .map(|(l, s)| (l, s.into_iter().collect()))
            .collect();
        let mut requirements_file = detect_requirements_file(&project.files);
        let mut generated_requirements = None;
        if requirements_file.is_none() {
            if let Some(reqs) = dependencies.get(&Language::Python).filter(|r| !r.is_empty()) {
                let text = emit_requirements(reqs)?;
                if write_requirements {
                    self.store
                        .modify_entry(&project_id, "requirements.txt", EntryAction::CreateFile(text.clone().into_bytes()))?;
                    requirements_file = Some("requirements.txt".into());
                }
                generated_requirements = Some(text);
            }
        }
        let suggested_request = EnvironmentRequest {
            languages: profile.languages.iter().map(|l| l.display_name().to_string()).collect(),
            has_requirements_file: requirements_file.is_some(),
            ..Default::default()
        };
        Ok(InferResponse {
            profile,
            dependencies,
            requirements_file,
            generated_requirements,
            warnings,
            suggested_request,
        })
    }

    /// Render a spec from a request alone, without a project.
    pub fn generate_spec(&self, request: &EnvironmentRequest) -> ApiResult<String> {
        Ok(generate_spec(request)?.render())
    }

    pub fn environment(&self, id: &str, request: &EnvironmentRequest) -> ApiResult<EnvironmentResponse> {
        let built = self.runner.build_environment(&pid(id)?, request)?;
        Ok(EnvironmentResponse {
            tag_id: built.image.tag_id,
            engine_tag: built.image.engine_tag,
            spec_digest: built.image.spec_digest,
            dockerfile: built.dockerfile,
        })
    }

    /// Spec the environment endpoint would build, without building it.
    pub fn plan_dockerfile(&self, id: &str, request: &EnvironmentRequest) -> ApiResult<String> {
        let plan = self
            .runner
            .plan(&pid(id)?, request)
            .map_err(|e| e.in_stage(Stage::Spec))?;
        Ok(plan.main_spec.render())
    }

    pub fn run(&self, id: &str, req: &RunRequest) -> ApiResult<RunRecord> {
        Ok(self.runner.execute(
            &pid(id)?,
            req.tag_id,
            &req.command,
            req.dataset_id.as_deref(),
            RunPurpose::Manual,
        )?)
    }

    pub fn get_run(&self, id: &str, run_id: &str) -> ApiResult<RunRecord> {
        Ok(self.runner.get_run(&pid(id)?, run_id)?)
    }

    pub fn list_runs(&self, id: &str) -> ApiResult<Vec<RunRecord>> {
        Ok(self.runner.list_runs(&pid(id)?)?)
    }

    pub fn verify(&self, id: &str, req: &VerifyRequest) -> ApiResult<VerifyResponse> {
        let project_id = pid(id)?;
        let opts = req.compare.options()?;
        if let Some((a, b)) = &req.runs {
            if req.tag_id.is_some() || req.command.is_some() {
                return Err(ApiError::validation("give either runs or tagId and command, not both"));
            }
            let ra = self.runner.get_run(&project_id, a)?;
            let rb = self.runner.get_run(&project_id, b)?;
            let report = compare_runs(&ra, &rb, req.compare.outputs.as_ref(), &opts)?;
            return Ok(VerifyResponse {
                report,
                runs: vec![ra, rb],
            });
        }
        let (Some(tag_id), Some(command)) = (req.tag_id, req.command.as_deref()) else {
            return Err(ApiError::validation("verify needs tagId and command, or two run ids"));
        };
        let pair = verify_reproducibility(
            &self.runner,
            &project_id,
            tag_id,
            command,
            req.dataset_id.as_deref(),
            req.compare.outputs.as_ref(),
            &opts,
        )?;
        Ok(VerifyResponse {
            report: pair.report,
            runs: vec![pair.first, pair.second],
        })
    }

    pub fn configure(&self, id: &str, req: &ConfigureRequest) -> ApiResult<ConfigureResponse> {
        let opts = req.compare.options()?;
        let done = configure_and_double_run(
            &self.runner,
            &pid(id)?,
            &req.environment,
            &req.command,
            req.compare.outputs.as_ref(),
            &opts,
        )?;
        Ok(ConfigureResponse {
            environment: EnvironmentResponse {
                tag_id: done.image.tag_id,
                engine_tag: done.image.engine_tag,
                spec_digest: done.image.spec_digest,
                dockerfile: done.dockerfile,
            },
            report: done.pair.report,
            runs: vec![done.pair.first, done.pair.second],
        })
    }

    pub fn package(&self, id: &str, req: &PackageRequest) -> ApiResult<PackageResponse> {
        let project_id = pid(id)?;
        let mut commands = req.commands.clone();
        if commands.is_empty() {
            for run in self.runner.list_runs(&project_id)? {
                if run.image.tag_id == req.tag_id && !commands.contains(&run.command) {
                    commands.push(run.command);
                }
            }
        }
        let out = match &req.out {
            Some(p) => p.clone(),
            None => self
                .store
                .project_dir(&project_id)
                .join("packages")
                .join(format!("{}-{}", req.tag_id, chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"))),
        };
        let manifest = build_package(
            &self.store,
            self.runner.driver(),
            &project_id,
            req.tag_id,
            &commands,
            &out,
            PackageOptions {
                embed_image: req.embed_image,
            },
        )
        .map_err(|e| e.in_stage(Stage::Package))?;
        let zip = if req.zip {
            let target = out.with_extension("zip");
            Some(zip_package(&out, &target)?)
        } else {
            None
        };
        Ok(PackageResponse { path: out, zip, manifest })
    }

    pub fn verify_package(&self, dir: &Path) -> ApiResult<PackageManifest> {
        Ok(verify_package(dir)?)
    }
}
