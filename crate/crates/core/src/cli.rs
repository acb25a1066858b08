//! Command-line interface.
//!
//! Exit codes: 0 on success, 2 for invalid input or unknown entities, 1 for
//! engine, stage and storage failures. With `--json`, results and errors
//! are printed as the same JSON documents the HTTP service returns.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::container::{ContainerSpec, EnvironmentRequest, FILES_DIR};
use crate::engine::{EngineDriver, SandboxDriver, DATASET_ENV};
use crate::error::Error;
use crate::http::DEFAULT_UPLOAD_LIMIT;
use crate::service::{
    ApiError, ApiResult, ConfigureRequest, CompareSettings, CreateProjectRequest, DatasetRequest, DriverKind,
    PackageRequest, RunRequest, Service, ServiceConfig, Upload, VerifyRequest,
};
use crate::store::{EntryAction, ProjectType, SeedDecl};
use crate::verify::{OutputSpec, OutputTarget, VerificationReport};

#[derive(Debug, Parser)]
#[command(name = "reprokit", version, about = "Turn an experiment directory into a verified reproducibility package")]
pub struct Cli {
    /// Project store directory
    #[arg(long, global = true, env = "REPROKIT_STORE")]
    store: Option<PathBuf>,
    /// Engine driver: docker, podman or sandbox
    #[arg(long, global = true, env = "REPROKIT_DRIVER")]
    driver: Option<String>,
    /// Docker-compatible engine CLI
    #[arg(long, global = true, env = "REPROKIT_ENGINE_CLI")]
    engine_cli: Option<PathBuf>,
    /// Working directory of the sandbox driver
    #[arg(long, global = true, env = "REPROKIT_SANDBOX_DIR")]
    sandbox_dir: Option<PathBuf>,
    /// Extra PATH entries for sandbox commands, colon separated
    #[arg(long, global = true, env = "REPROKIT_SANDBOX_PATH")]
    sandbox_path: Option<String>,
    /// TOML file with defaults for the options above
    #[arg(long, global = true, env = "REPROKIT_CONFIG")]
    config: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a project
    Init {
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "")]
        description: String,
        /// script, scriptWithDatabase or ai
        #[arg(long = "type", default_value = "script")]
        project_type: String,
    },
    /// Add files from a directory, a zip archive, a git URL or a DOI
    Add {
        #[arg(long)]
        project: String,
        #[arg(long, conflicts_with = "url", required_unless_present = "url")]
        path: Option<PathBuf>,
        #[arg(long)]
        url: Option<String>,
    },
    /// Create, edit or delete one entry of the project tree
    Entry(EntryArgs),
    /// Show a project, or list all projects
    Show {
        #[arg(long)]
        project: Option<String>,
    },
    /// Infer languages and dependencies
    Infer {
        #[arg(long)]
        project: String,
        /// Add a generated requirements.txt when the tree has none
        #[arg(long)]
        write_requirements: bool,
    },
    /// Render a container spec from a request file without a project
    Spec {
        #[arg(long)]
        request: PathBuf,
    },
    /// Generate the project's container spec and build its image
    Env {
        #[arg(long)]
        project: String,
        #[arg(long)]
        request: PathBuf,
        /// Also write the Dockerfile here
        #[arg(long)]
        output: Option<PathBuf>,
        /// Generate the Dockerfile only
        #[arg(long)]
        no_build: bool,
    },
    /// Build the environment and run the command twice
    Configure {
        #[arg(long)]
        project: String,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        command: String,
        #[command(flatten)]
        compare: CompareArgs,
    },
    /// Run a command on a built image
    Run {
        #[arg(long)]
        project: String,
        #[arg(long)]
        tag: u64,
        #[arg(long)]
        command: String,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Show one run, or list a project's runs
    Runs {
        #[arg(long)]
        project: String,
        #[arg(long)]
        run: Option<String>,
    },
    /// Verify reproducibility with two fresh runs, or compare two stored runs
    Verify {
        #[arg(long)]
        project: String,
        #[arg(long, requires = "command", conflicts_with = "runs")]
        tag: Option<u64>,
        #[arg(long)]
        command: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
        runs: Option<Vec<String>>,
        #[command(flatten)]
        compare: CompareArgs,
    },
    /// Export a package, or check one with --verify
    Pack {
        #[arg(long, required_unless_present = "verify")]
        project: Option<String>,
        #[arg(long, required_unless_present = "verify")]
        tag: Option<u64>,
        /// Command to record; repeatable. Defaults to the commands run on the image.
        #[arg(long = "command")]
        commands: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        embed_image: bool,
        #[arg(long)]
        zip: bool,
        /// Check an existing package directory
        #[arg(long, value_name = "DIR", conflicts_with_all = ["project", "tag"])]
        verify: Option<PathBuf>,
    },
    /// Associate a dataset with a project
    Dataset {
        #[arg(long)]
        project: String,
        #[arg(long, required_unless_present = "id")]
        root: Option<String>,
        #[arg(long, default_value = "")]
        label: String,
        /// Root is an absolute host path outside the project tree
        #[arg(long)]
        external: bool,
        /// Reactivate a dataset from the project's history
        #[arg(long, conflicts_with = "root")]
        id: Option<String>,
    },
    /// Declare the seeds used by the code, from a JSON list
    Seeds {
        #[arg(long)]
        project: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long, env = "REPROKIT_PORT")]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Maximum request body size in bytes
        #[arg(long)]
        upload_limit: Option<usize>,
    },
    /// Docker-compatible CLI backed by the sandbox driver
    #[command(hide = true)]
    SandboxEngine {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct EntryArgs {
    #[arg(long)]
    project: String,
    /// Path inside the project tree
    #[arg(long)]
    path: String,
    /// Create a file with the contents of SRC
    #[arg(long, value_name = "SRC", group = "action")]
    create_file: Option<PathBuf>,
    #[arg(long, group = "action")]
    create_folder: bool,
    /// Replace a file with the contents of SRC
    #[arg(long, value_name = "SRC", group = "action")]
    edit: Option<PathBuf>,
    #[arg(long, group = "action")]
    delete: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Compare only these output files or folders; repeatable
    #[arg(long = "output")]
    outputs: Vec<String>,
    /// Compare console output when --output is given
    #[arg(long)]
    console: bool,
    #[arg(long)]
    include_stderr: bool,
    /// Ignore console lines matching this regex; repeatable
    #[arg(long = "ignore")]
    ignore: Vec<String>,
}

impl CompareArgs {
    fn settings(&self) -> CompareSettings {
        let mut locations: Vec<OutputTarget> = self
            .outputs
            .iter()
            .map(|p| OutputTarget::FilePath { path: p.clone() })
            .collect();
        if self.console && !locations.is_empty() {
            locations.push(OutputTarget::ConsoleOutput);
        }
        CompareSettings {
            outputs: (!locations.is_empty()).then_some(OutputSpec { locations }),
            include_stderr: self.include_stderr,
            ignore_line_patterns: self.ignore.clone(),
        }
    }
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FileConfig {
    store: Option<PathBuf>,
    driver: Option<String>,
    engine_cli: Option<PathBuf>,
    sandbox_dir: Option<PathBuf>,
    sandbox_path: Option<Vec<PathBuf>>,
    port: Option<u16>,
    upload_limit: Option<usize>,
}

struct Resolved {
    service: ServiceConfig,
    port: u16,
    upload_limit: usize,
}

fn resolve(cli: &Cli) -> ApiResult<Resolved> {
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ApiError::validation(format!("config {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| ApiError::validation(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let store = cli
        .store
        .clone()
        .or(file.store)
        .unwrap_or_else(|| match std::env::var_os("HOME") {
            Some(home) => PathBuf::from(home).join(".reprokit"),
            None => PathBuf::from(".reprokit"),
        });
    let driver: DriverKind = cli
        .driver
        .clone()
        .or(file.driver)
        .unwrap_or_else(|| "docker".into())
        .parse()?;
    let sandbox_path = match &cli.sandbox_path {
        Some(s) => std::env::split_paths(s).filter(|p| !p.as_os_str().is_empty()).collect(),
        None => file.sandbox_path.unwrap_or_default(),
    };
    Ok(Resolved {
        service: ServiceConfig {
            store,
            driver,
            engine_cli: cli.engine_cli.clone().or(file.engine_cli),
            sandbox_dir: cli.sandbox_dir.clone().or(file.sandbox_dir),
            sandbox_path,
        },
        port: file.port.unwrap_or(8080),
        upload_limit: file.upload_limit.unwrap_or(DEFAULT_UPLOAD_LIMIT),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> ApiResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> ApiResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))
}

/// What a command prints: the JSON document, or a human rendering.
struct Output {
    json: serde_json::Value,
    human: String,
}

fn output<T: Serialize>(value: &T, human: impl Into<String>) -> Output {
    Output {
        json: serde_json::to_value(value).expect("response serializes"),
        human: human.into(),
    }
}

fn report_table(report: &VerificationReport) -> String {
    let mut s = format!(
        "verdict: {:?}\nruns: {} {}\nconsole: {}\n",
        report.verdict,
        report.runs.0,
        report.runs.1,
        if !report.console_compared {
            "not compared"
        } else if report.console_match {
            "match"
        } else {
            "differs"
        }
    );
    for d in &report.console_diff {
        s.push_str(&format!(
            "  line {}: a={:?} b={:?}\n",
            d.line,
            d.a.as_deref().unwrap_or(""),
            d.b.as_deref().unwrap_or("")
        ));
    }
    if report.file_diffs.is_empty() {
        s.push_str("files: match\n");
    } else {
        s.push_str("files:\n");
        for d in &report.file_diffs {
            s.push_str(&format!("  {:<16} {}\n", format!("{:?}", d.status), d.path));
        }
    }
    s
}

fn dispatch(cli: &Cli, resolved: &Resolved) -> ApiResult<Output> {
    let svc = || Service::open(resolved.service.clone());
    match &cli.command {
        Command::Init {
            name,
            description,
            project_type,
        } => {
            let project_type: ProjectType = project_type.parse()?;
            let p = svc()?.create_project(&CreateProjectRequest {
                name: name.clone(),
                description: description.clone(),
                project_type,
            })?;
            let human = format!("{}\n", p.id);
            Ok(output(&p, human))
        }
        Command::Add { project, path, url } => {
            let upload = match (path, url) {
                (Some(p), _) => Upload::Path(p.clone()),
                (None, Some(u)) => Upload::Url(u.clone()),
                (None, None) => return Err(ApiError::validation("give --path or --url")),
            };
            let r = svc()?.add_files(project, upload)?;
            let human = format!("added {} entries\n", r.files.len());
            Ok(output(&r, human))
        }
        Command::Entry(a) => {
            let action = if let Some(src) = &a.create_file {
                EntryAction::CreateFile(read_bytes(src)?)
            } else if a.create_folder {
                EntryAction::CreateFolder
            } else if let Some(src) = &a.edit {
                EntryAction::EditFile(read_bytes(src)?)
            } else if a.delete {
                EntryAction::Delete
            } else {
                return Err(ApiError::validation(
                    "give one of --create-file, --create-folder, --edit, --delete",
                ));
            };
            let r = svc()?.modify_entry(&a.project, &a.path, action)?;
            let human = format!("{} {}\n", if r.deleted { "deleted" } else { "wrote" }, r.path);
            Ok(output(&r, human))
        }
        Command::Show { project } => match project {
            Some(id) => {
                let p = svc()?.project(id)?;
                let human = serde_json::to_string_pretty(&p).expect("serializes") + "\n";
                Ok(output(&p, human))
            }
            None => {
                let all = svc()?.list_projects()?;
                let human: String = all.iter().map(|p| format!("{}\t{}\n", p.id, p.name)).collect();
                Ok(output(&all, human))
            }
        },
        Command::Infer {
            project,
            write_requirements,
        } => {
            let r = svc()?.infer(project, *write_requirements)?;
            let mut human = String::from("languages:");
            for l in &r.profile.languages {
                human.push_str(&format!(" {l}"));
            }
            human.push('\n');
            for (lang, reqs) in &r.dependencies {
                let names: Vec<&str> = reqs.iter().map(|r| r.name.as_str()).collect();
                human.push_str(&format!("{lang} dependencies: {}\n", names.join(" ")));
            }
            for w in &r.warnings {
                human.push_str(&format!("warning: {w}\n"));
            }
            Ok(output(&r, human))
        }
        Command::Spec { request } => {
            let req: EnvironmentRequest = read_json(request)?;
            let dockerfile = svc()?.generate_spec(&req)?;
            Ok(output(&serde_json::json!({ "dockerfile": dockerfile }), dockerfile))
        }
        Command::Env {
            project,
            request,
            output: out,
            no_build,
        } => {
            let req: EnvironmentRequest = read_json(request)?;
            let service = svc()?;
            let (value, dockerfile) = if *no_build {
                let d = service.plan_dockerfile(project, &req)?;
                (serde_json::json!({ "dockerfile": d }), d)
            } else {
                let r = service.environment(project, &req)?;
                eprintln!("built {} (tagId {})", r.engine_tag, r.tag_id);
                let d = r.dockerfile.clone();
                (serde_json::to_value(&r).expect("serializes"), d)
            };
            if let Some(path) = out {
                std::fs::write(path, &dockerfile).map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            Ok(Output {
                json: value,
                human: dockerfile,
            })
        }
        Command::Configure {
            project,
            request,
            command,
            compare,
        } => {
            let environment: EnvironmentRequest = read_json(request)?;
            let r = svc()?.configure(
                project,
                &ConfigureRequest {
                    environment,
                    command: command.clone(),
                    compare: compare.settings(),
                },
            )?;
            let human = format!("tagId: {}\n{}", r.environment.tag_id, report_table(&r.report));
            Ok(output(&r, human))
        }
        Command::Run {
            project,
            tag,
            command,
            dataset,
        } => {
            let r = svc()?.run(
                project,
                &RunRequest {
                    command: command.clone(),
                    tag_id: *tag,
                    dataset_id: dataset.clone(),
                },
            )?;
            if !cli.json {
                let _ = std::io::stderr().write_all(r.outcome.stderr.as_bytes());
                eprintln!("run {} exited with {}", r.run_id, r.outcome.exit_code);
            }
            let human = r.outcome.stdout.to_string_lossy();
            Ok(output(&r, human))
        }
        Command::Runs { project, run } => match run {
            Some(rid) => {
                let r = svc()?.get_run(project, rid)?;
                let human = serde_json::to_string_pretty(&r).expect("serializes") + "\n";
                Ok(output(&r, human))
            }
            None => {
                let runs = svc()?.list_runs(project)?;
                let human: String = runs
                    .iter()
                    .map(|r| {
                        format!(
                            "{}\t{}\t{:?}\texit {}\t{}\n",
                            r.run_id, r.image.tag_id, r.purpose, r.outcome.exit_code, r.command
                        )
                    })
                    .collect();
                Ok(output(&runs, human))
            }
        },
        Command::Verify {
            project,
            tag,
            command,
            dataset,
            runs,
            compare,
        } => {
            let req = VerifyRequest {
                tag_id: *tag,
                command: command.clone(),
                dataset_id: dataset.clone(),
                runs: runs.as_ref().map(|r| (r[0].clone(), r[1].clone())),
                compare: compare.settings(),
            };
            let r = svc()?.verify(project, &req)?;
            let human = report_table(&r.report);
            Ok(output(&r, human))
        }
        Command::Pack {
            project,
            tag,
            commands,
            out,
            embed_image,
            zip,
            verify,
        } => {
            if let Some(dir) = verify {
                let m = svc()?.verify_package(dir)?;
                let human = format!("package ok: {} files, image {}\n", m.inventory.len(), m.engine_tag);
                return Ok(output(&m, human));
            }
            let (Some(project), Some(tag)) = (project, tag) else {
                return Err(ApiError::validation("pack needs --project and --tag"));
            };
            let r = svc()?.package(
                project,
                &PackageRequest {
                    tag_id: *tag,
                    commands: commands.clone(),
                    out: out.clone(),
                    embed_image: *embed_image,
                    zip: *zip,
                },
            )?;
            let mut human = format!("{}\n", r.path.display());
            if let Some(z) = &r.zip {
                human.push_str(&format!("{}\n", z.display()));
            }
            Ok(output(&r, human))
        }
        Command::Dataset {
            project,
            root,
            label,
            external,
            id,
        } => {
            let p = svc()?.set_dataset(
                project,
                &DatasetRequest {
                    root: root.clone().unwrap_or_default(),
                    label: label.clone(),
                    external: *external,
                    id: id.clone(),
                },
            )?;
            let human = format!("{}\n", p.dataset.as_ref().map(|d| d.id.as_str()).unwrap_or(""));
            Ok(output(&p, human))
        }
        Command::Seeds { project, file } => {
            let seeds: Vec<SeedDecl> = read_json(file)?;
            let p = svc()?.declare_seeds(project, seeds)?;
            let human = format!("{} seeds declared\n", p.seeds.len());
            Ok(output(&p, human))
        }
        Command::Serve { .. } | Command::SandboxEngine { .. } => unreachable!("handled before dispatch"),
    }
}

fn serve(resolved: &Resolved, port: Option<u16>, bind: &str, upload_limit: Option<usize>) -> ApiResult<()> {
    let service = Arc::new(Service::open(resolved.service.clone())?);
    let ip: std::net::IpAddr = bind
        .parse()
        .map_err(|_| ApiError::validation(format!("invalid bind address {bind:?}")))?;
    let addr = SocketAddr::new(ip, port.unwrap_or(resolved.port));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(crate::http::serve_with_shutdown(
        service,
        addr,
        upload_limit.unwrap_or(resolved.upload_limit),
        |bound| eprintln!("listening on http://{bound}"),
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
    ))
    .map_err(|e| Error::io(format!("serving on {addr}"), e))?;
    Ok(())
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let resolved = match resolve(&cli) {
        Ok(r) => r,
        Err(e) => return fail(&cli, e),
    };
    match &cli.command {
        Command::SandboxEngine { args } => return sandbox_engine(&resolved.service, args),
        Command::Serve {
            port,
            bind,
            upload_limit,
        } => {
            return match serve(&resolved, *port, bind, *upload_limit) {
                Ok(()) => 0,
                Err(e) => fail(&cli, e),
            }
        }
        _ => {}
    }
    match dispatch(&cli, &resolved) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if cli.json {
                let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&out.json).expect("serializes"));
            } else {
                let _ = stdout.write_all(out.human.as_bytes());
            }
            0
        }
        Err(e) => fail(&cli, e),
    }
}

fn fail(cli: &Cli, err: ApiError) -> i32 {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&err).expect("serializes"));
    } else {
        eprintln!("error: {}", err.message);
        for d in &err.details {
            eprintln!("  {d}");
        }
    }
    err.exit_code()
}

/// Arguments of `create` in the engine shim.
#[derive(Debug, Default, PartialEq, Eq)]
struct CreateArgs {
    name: Option<String>,
    workdir: Option<String>,
    env: BTreeMap<String, String>,
    volumes: Vec<(String, String)>,
    image: String,
    command: Vec<String>,
}

fn parse_create(args: &[String]) -> Result<CreateArgs, String> {
    let mut out = CreateArgs::default();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let mut value = |flag: &str| it.next().cloned().ok_or_else(|| format!("{flag} needs a value"));
        match a.as_str() {
            "--name" => out.name = Some(value("--name")?),
            "-w" | "--workdir" => out.workdir = Some(value("-w")?),
            "-e" | "--env" => {
                let kv = value("-e")?;
                let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad -e value {kv:?}"))?;
                out.env.insert(k.to_string(), v.to_string());
            }
            "-v" | "--volume" => {
                let spec = value("-v")?;
                let mut parts = spec.splitn(3, ':');
                let host = parts.next().unwrap_or_default().to_string();
                let target = parts.next().ok_or_else(|| format!("bad -v value {spec:?}"))?.to_string();
                out.volumes.push((host, target));
            }
            "--network" => return Err("the sandbox cannot attach networks".into()),
            flag if flag.starts_with('-') => return Err(format!("unsupported create flag {flag}")),
            image => {
                out.image = image.to_string();
                out.command = it.cloned().collect();
                break;
            }
        }
    }
    if out.image.is_empty() {
        return Err("create needs an image".into());
    }
    Ok(out)
}

fn shim_command(command: &[String]) -> String {
    match command {
        [sh, flag, script] if sh == "sh" && flag == "-c" => script.clone(),
        words => words
            .iter()
            .map(|w| format!("'{}'", w.replace('\'', r"'\''")))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// Copy a directory or file following `docker cp` semantics: an existing
/// destination directory receives the source inside it.
fn copy_out(src: &Path, dest: &Path) -> Result<(), String> {
    let target = if dest.is_dir() {
        dest.join(src.file_name().ok_or("source has no name")?)
    } else {
        dest.to_path_buf()
    };
    if src.is_dir() {
        crate::store::copy_tree(src, &target, false).map_err(|e| e.to_string())
    } else {
        std::fs::copy(src, &target).map(|_| ()).map_err(|e| e.to_string())
    }
}

fn sandbox_engine(config: &ServiceConfig, args: &[String]) -> i32 {
    let driver = SandboxDriver::new(config.sandbox_root()).with_extra_path(config.sandbox_path.clone());
    match shim(&driver, args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("sandbox-engine: {msg}");
            1
        }
    }
}

fn shim(driver: &SandboxDriver, args: &[String]) -> Result<i32, String> {
    let (verb, rest) = args.split_first().ok_or("missing subcommand")?;
    match verb.as_str() {
        "info" => {
            driver.check_available().map_err(|e| e.to_string())?;
            println!("sandbox engine at {}", driver.root().display());
            Ok(0)
        }
        "build" => {
            let mut tag = None;
            let mut file = None;
            let mut context = None;
            let mut it = rest.iter();
            while let Some(a) = it.next() {
                match a.as_str() {
                    "-t" | "--tag" => tag = it.next().cloned(),
                    "-f" | "--file" => file = it.next().cloned(),
                    other if other.starts_with('-') => return Err(format!("unsupported build flag {other}")),
                    other => context = Some(other.to_string()),
                }
            }
            let tag = tag.ok_or("build needs -t")?;
            let context = PathBuf::from(context.ok_or("build needs a context")?);
            let file = file.map(PathBuf::from).unwrap_or_else(|| context.join("Dockerfile"));
            let file = if file.is_relative() && !file.exists() { context.join(file) } else { file };
            let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let spec = ContainerSpec::parse(&text).map_err(|e| e.to_string())?;
            match driver.build(&spec, &context, &tag) {
                Ok(log) => {
                    print!("{log}");
                    Ok(0)
                }
                Err(Error::Engine { message, log }) => {
                    print!("{log}");
                    Err(message)
                }
                Err(e) => Err(e.to_string()),
            }
        }
        "image" if rest.first().map(String::as_str) == Some("inspect") => {
            let tag = rest.get(1).ok_or("image inspect needs a tag")?;
            Ok(if driver.image_exists(tag).map_err(|e| e.to_string())? { 0 } else { 1 })
        }
        "create" => {
            let c = parse_create(rest)?;
            if let Some(w) = &c.workdir {
                if w != FILES_DIR {
                    return Err(format!("the sandbox runs commands in {FILES_DIR}, not {w}"));
                }
            }
            let mut env = c.env.clone();
            if let Some(ds) = env.get(DATASET_ENV).cloned() {
                if let Some((host, _)) = c.volumes.iter().find(|(_, target)| *target == ds) {
                    env.insert(DATASET_ENV.into(), host.clone());
                }
            }
            let id = driver
                .create(&c.image, &shim_command(&c.command), env, c.name.as_deref())
                .map_err(|e| e.to_string())?;
            println!("{id}");
            Ok(0)
        }
        "start" => {
            let name = rest.iter().find(|a| !a.starts_with('-')).ok_or("start needs a container")?;
            let out = driver.start(name).map_err(|e| e.to_string())?;
            let _ = std::io::stdout().write_all(&out.stdout);
            let _ = std::io::stderr().write_all(&out.stderr);
            Ok(out.exit_code)
        }
        "cp" => {
            let [src, dest] = rest else {
                return Err("cp needs CONTAINER:PATH DEST".into());
            };
            let (name, path) = src.split_once(':').ok_or("cp source must be CONTAINER:PATH")?;
            let from = driver.container_path(name, path).map_err(|e| e.to_string())?;
            copy_out(&from, Path::new(dest))?;
            Ok(0)
        }
        "rm" => {
            for name in rest.iter().filter(|a| !a.starts_with('-')) {
                driver.remove(name).map_err(|e| e.to_string())?;
            }
            Ok(0)
        }
        "load" => Err("the sandbox cannot load image archives; rebuild from environment/Dockerfile".into()),
        other => Err(format!("unsupported engine command {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn create_arguments() {
        let c = parse_create(&strings(&[
            "--name", "n1", "-w", "/files", "-e", "A=b=c", "-v", "/h:/dataset:ro", "img:1", "sh", "-c", "echo hi",
        ]))
        .unwrap();
        assert_eq!(c.name.as_deref(), Some("n1"));
        assert_eq!(c.env["A"], "b=c");
        assert_eq!(c.volumes, [("/h".to_string(), "/dataset".to_string())]);
        assert_eq!(c.image, "img:1");
        assert_eq!(shim_command(&c.command), "echo hi");
        assert!(parse_create(&strings(&["--network", "x", "img"])).is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("s");
        let s = store.to_str().unwrap();
        assert_eq!(run(["reprokit", "--store", s, "--driver", "sandbox", "init", "--name", "x"]), 0);
        assert_eq!(
            run(["reprokit", "--store", s, "--driver", "sandbox", "run", "--project", "nope", "--tag", "999", "--command", "true"]),
            2
        );
        assert_eq!(run(["reprokit", "--store", s, "--driver", "bogus", "show"]), 2);
        assert_eq!(run(["reprokit", "--store", s, "init"]), 2);
    }

    #[test]
    fn config_file_supplies_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "store = \"/tmp/x\"\ndriver = \"sandbox\"\nport = 9000\n").unwrap();
        let cli = Cli::try_parse_from(["reprokit", "--config", cfg.to_str().unwrap(), "show"]).unwrap();
        let r = resolve(&cli).unwrap();
        assert_eq!(r.service.store, PathBuf::from("/tmp/x"));
        assert_eq!(r.service.driver, DriverKind::Sandbox);
        assert_eq!(r.port, 9000);
    }
}
