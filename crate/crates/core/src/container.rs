//! Dockerfile generation from environment requests.
//!
//! A [`ContainerSpec`] is an ordered directive list rendered to
//! Dockerfile-compatible text. Generation is a pure function of the
//! [`EnvironmentRequest`] (plus, optionally, the project tree used to anchor
//! project-rooted paths in commands).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::language::{Language, LanguageTables, ResolvedToolchain};
use crate::store::{FileNode, ProjectId, ProjectType, SeedDecl};

pub const DEFAULT_BASE_IMAGE: &str = "ubuntu:20.04";
/// Working directory the project tree is copied into.
pub const FILES_DIR: &str = "/files";
const UPDATE_ARGUMENT: &str = " apt update &&  apt upgrade -y";
const COPY_ARGUMENT: &str = "./files .";
const MAVEN_BUILD: &str = "mvn package";
const PIP_REQUIREMENTS: &str = "pip install -r requirements.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DirectiveKind {
    From,
    Run,
    Workdir,
    Copy,
}

impl DirectiveKind {
    pub fn keyword(self) -> &'static str {
        match self {
            DirectiveKind::From => "FROM",
            DirectiveKind::Run => "RUN",
            DirectiveKind::Workdir => "WORKDIR",
            DirectiveKind::Copy => "COPY",
        }
    }
}

impl FromStr for DirectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FROM" => Ok(DirectiveKind::From),
            "RUN" => Ok(DirectiveKind::Run),
            "WORKDIR" => Ok(DirectiveKind::Workdir),
            "COPY" => Ok(DirectiveKind::Copy),
            other => Err(Error::validation(format!("malformed directive keyword {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Directive {
    pub kind: DirectiveKind,
    pub argument: String,
}

impl Directive {
    pub fn new(kind: DirectiveKind, argument: impl Into<String>) -> Self {
        Directive {
            kind,
            argument: argument.into(),
        }
    }

    pub fn run(argument: impl Into<String>) -> Self {
        Directive::new(DirectiveKind::Run, argument)
    }

    pub fn workdir(argument: impl Into<String>) -> Self {
        Directive::new(DirectiveKind::Workdir, argument)
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind.keyword(), self.argument)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    directives: Vec<Directive>,
}

impl ContainerSpec {
    /// Validates that the list starts with FROM, copies the tree exactly
    /// once, and that every argument renders to a single clean line.
    pub fn from_directives(directives: Vec<Directive>) -> Result<Self> {
        match directives.first() {
            Some(d) if d.kind == DirectiveKind::From => {}
            _ => return Err(Error::validation("malformed spec: first directive must be FROM")),
        }
        let copies = directives.iter().filter(|d| d.kind == DirectiveKind::Copy).count();
        if copies != 1 {
            return Err(Error::validation(format!(
                "malformed spec: expected exactly one COPY, found {copies}"
            )));
        }
        for d in &directives {
            if d.argument.trim().is_empty() {
                return Err(Error::validation(format!("malformed directive: empty {}", d.kind.keyword())));
            }
            if d.argument.contains(['\n', '\r']) {
                return Err(Error::validation(format!(
                    "malformed directive: {} argument spans lines",
                    d.kind.keyword()
                )));
            }
            if d.argument != d.argument.trim_end() {
                return Err(Error::validation(format!(
                    "malformed directive: trailing whitespace in {}",
                    d.kind.keyword()
                )));
            }
        }
        Ok(ContainerSpec { directives })
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    /// Dockerfile text: one directive per line, LF endings.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for d in &self.directives {
            out.push_str(&d.to_string());
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.render().as_bytes())
    }

    /// Inverse of [`ContainerSpec::render`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut directives = Vec::new();
        for line in text.split_terminator('\n') {
            let (keyword, argument) = line
                .split_once(' ')
                .ok_or_else(|| Error::validation(format!("malformed directive line {line:?}")))?;
            directives.push(Directive::new(keyword.parse()?, argument));
        }
        ContainerSpec::from_directives(directives)
    }

    pub fn base_image(&self) -> &str {
        &self.directives[0].argument
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatabaseEngine {
    #[serde(alias = "mongo", alias = "mongodb", alias = "MongoDB")]
    Mongo,
    #[serde(alias = "sqlite")]
    SQLite,
    #[serde(alias = "mysql", alias = "MySql")]
    MySQL,
    #[serde(alias = "postgresql", alias = "postgres", alias = "Postgres")]
    PostgreSQL,
}

struct EngineInfo {
    image: &'static str,
    versions: &'static [&'static str],
    port: u16,
}

impl DatabaseEngine {
    fn info(self) -> EngineInfo {
        match self {
            DatabaseEngine::Mongo => EngineInfo {
                image: "mongo",
                versions: &["7.0", "6.0", "5.0", "4.4"],
                port: 27017,
            },
            DatabaseEngine::MySQL => EngineInfo {
                image: "mysql",
                versions: &["8.0", "5.7"],
                port: 3306,
            },
            DatabaseEngine::PostgreSQL => EngineInfo {
                image: "postgres",
                versions: &["16", "15", "14", "13", "12"],
                port: 5432,
            },
            DatabaseEngine::SQLite => EngineInfo {
                image: "",
                versions: &["3"],
                port: 0,
            },
        }
    }

    pub fn alias(self) -> &'static str {
        match self {
            DatabaseEngine::Mongo => "mongo",
            DatabaseEngine::SQLite => "sqlite",
            DatabaseEngine::MySQL => "mysql",
            DatabaseEngine::PostgreSQL => "postgresql",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub user: String,
    pub secret: String,
}

impl Credentials {
    pub fn generate() -> Self {
        use rand::RngExt;
        let secret: String = rand::rng()
            .sample_iter(rand::distr::Alphanumeric)
            .take(24)
            .map(char::from)
            .collect();
        Credentials {
            user: "repro".to_string(),
            secret,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatabaseConfig {
    pub engine: DatabaseEngine,
    #[serde(default)]
    pub version: String,
    pub database_name: String,
    #[serde(default)]
    pub credentials: Option<Credentials>,
    #[serde(default)]
    pub init_scripts: Vec<String>,
}

fn bool_or_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Text(String),
    }
    match Flag::deserialize(d)? {
        Flag::Bool(b) => Ok(b),
        Flag::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" | "" => Ok(false),
            other => Err(serde::de::Error::custom(format!("expected a boolean, got {other:?}"))),
        },
    }
}

/// Environment request. Field names follow the request payloads the tool
/// has always accepted (`languages`, `languagesVersion`, `commandsToAdd`,
/// `hasRequirementsFile`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvironmentRequest {
    pub languages: Vec<String>,
    #[serde(default)]
    pub languages_version: BTreeMap<String, String>,
    #[serde(default)]
    pub commands_to_add: Vec<String>,
    #[serde(default, deserialize_with = "bool_or_string")]
    pub has_requirements_file: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<SeedDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_type: Option<ProjectType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database: Option<DatabaseConfig>,
}

impl EnvironmentRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("environment request: {e}")))
    }

    /// Requested languages in request order without duplicates, each paired
    /// with its version request.
    fn resolved_languages(&self, tables: &LanguageTables) -> Result<Vec<(Language, Option<String>)>> {
        let mut order: Vec<Language> = Vec::new();
        for name in &self.languages {
            let lang = tables.language_named(name)?;
            if !order.contains(&lang) {
                order.push(lang);
            }
        }
        let mut versions: BTreeMap<Language, String> = BTreeMap::new();
        for (name, version) in &self.languages_version {
            let lang = tables.language_named(name)?;
            if !order.contains(&lang) {
                return Err(Error::validation(format!(
                    "languagesVersion names {name:?}, which is not in languages"
                )));
            }
            versions.insert(lang, version.clone());
        }
        Ok(order
            .into_iter()
            .map(|l| {
                let v = versions.get(&l).cloned();
                (l, v)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpecOptions<'a> {
    pub base_image: &'a str,
    pub tables: &'a LanguageTables,
    /// When set, project-rooted absolute paths in commands are anchored to
    /// the copied tree.
    pub project_tree: Option<&'a [FileNode]>,
}

impl Default for SpecOptions<'_> {
    fn default() -> Self {
        SpecOptions {
            base_image: DEFAULT_BASE_IMAGE,
            tables: LanguageTables::builtin(),
            project_tree: None,
        }
    }
}

/// Install directives for one toolchain; empty for preinstalled ones.
pub fn install_block(toolchain: &ResolvedToolchain) -> Vec<Directive> {
    if toolchain.preinstalled {
        return Vec::new();
    }
    let mut block = vec![Directive::run(format!("apt install -y {}", toolchain.packages.join(" ")))];
    for alt in &toolchain.alternatives {
        block.push(Directive::run(format!(
            "update-alternatives --install {} {} {} {}",
            alt.link, alt.name, alt.path, alt.priority
        )));
    }
    block
}

/// `cd <path>` becomes WORKDIR, everything else RUN, order preserved.
pub fn translate_commands<S: AsRef<str>>(commands: &[S]) -> Vec<Directive> {
    commands
        .iter()
        .map(|c| {
            let c = c.as_ref().trim();
            match cd_target(c) {
                Some(path) => Directive::workdir(path),
                None => Directive::run(c),
            }
        })
        .collect()
}

fn cd_target(command: &str) -> Option<String> {
    let rest = command.strip_prefix("cd")?;
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let path = rest.trim();
    if path.is_empty() || path.contains("&&") || path.contains(';') || path.contains('|') {
        return None;
    }
    let quoted = path.len() >= 2
        && ((path.starts_with('"') && path.ends_with('"')) || (path.starts_with('\'') && path.ends_with('\'')));
    let target = if quoted {
        &path[1..path.len() - 1]
    } else if path.contains(char::is_whitespace) {
        return None;
    } else {
        path
    };
    if target.is_empty() {
        return None;
    }
    Some(target.to_string())
}

pub fn generate_spec(request: &EnvironmentRequest) -> Result<ContainerSpec> {
    generate_spec_with(request, &SpecOptions::default())
}

pub fn generate_spec_with(request: &EnvironmentRequest, opts: &SpecOptions<'_>) -> Result<ContainerSpec> {
    if request.languages.is_empty() {
        return Err(Error::validation("environment request lists no languages"));
    }
    if request.project_type == Some(ProjectType::AI) && request.seeds.is_empty() {
        return Err(Error::validation(
            "AI projects must declare the seeds used in the code before an environment can be built",
        ));
    }
    for c in &request.commands_to_add {
        if c.contains(['\n', '\r']) {
            return Err(Error::validation(format!("command spans multiple lines: {c:?}")));
        }
    }
    let languages = request.resolved_languages(opts.tables)?;

    let mut directives = vec![
        Directive::new(DirectiveKind::From, opts.base_image),
        Directive::run(UPDATE_ARGUMENT),
    ];
    for (lang, version) in &languages {
        let toolchain = opts.tables.resolve_toolchain(*lang, version.as_deref())?;
        directives.extend(install_block(&toolchain));
    }
    directives.push(Directive::workdir(FILES_DIR));
    directives.push(Directive::new(DirectiveKind::Copy, COPY_ARGUMENT));
    if languages.iter().any(|(l, _)| *l == Language::JavaMaven) {
        directives.push(Directive::run(MAVEN_BUILD));
    }
    let mut commands = translate_commands(&request.commands_to_add);
    commands.retain(|d| !d.argument.is_empty());
    if let Some(tree) = opts.project_tree {
        anchor_project_paths(&mut commands, tree);
    }
    directives.extend(commands);
    if request.has_requirements_file {
        directives.push(Directive::run(PIP_REQUIREMENTS));
    }
    ContainerSpec::from_directives(directives)
}

/// Rewrite command tokens such as `/src/main.cpp` that name an entry of the
/// project tree: the tree lives under `/files`, so the root-relative form
/// would not resolve inside the container.
fn anchor_project_paths(commands: &mut [Directive], tree: &[FileNode]) {
    let entries: BTreeSet<&str> = tree.iter().map(|n| n.path.as_str()).collect();
    let mut cwd = FILES_DIR.to_string();
    for d in commands.iter_mut() {
        match d.kind {
            DirectiveKind::Workdir => cwd = resolve_workdir(&cwd, &d.argument),
            DirectiveKind::Run => {
                let rewritten: Vec<String> = d
                    .argument
                    .split(' ')
                    .map(|token| {
                        let Some(rest) = token.strip_prefix('/') else {
                            return token.to_string();
                        };
                        let rest = rest.trim_end_matches('/');
                        if rest.is_empty() || token.starts_with("/files/") || !entries.contains(rest) {
                            return token.to_string();
                        }
                        if cwd == FILES_DIR {
                            format!("./{}", &token[1..])
                        } else {
                            format!("{FILES_DIR}{token}")
                        }
                    })
                    .collect();
                d.argument = rewritten.join(" ");
            }
            _ => {}
        }
    }
}

/// Container working directory after `WORKDIR arg` from `cwd`.
pub fn resolve_workdir(cwd: &str, arg: &str) -> String {
    let mut parts: Vec<&str> = if arg.starts_with('/') {
        Vec::new()
    } else {
        cwd.split('/').filter(|s| !s.is_empty()).collect()
    };
    for seg in arg.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            s => parts.push(s),
        }
    }
    format!("/{}", parts.join("/"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Sidecar {
    pub image: String,
    pub env: BTreeMap<String, String>,
    pub alias: String,
    pub port: u16,
    /// Project-relative paths mounted into the engine's init directory.
    #[serde(default)]
    pub init_scripts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvironmentPlan {
    pub main_spec: ContainerSpec,
    pub sidecars: Vec<Sidecar>,
    pub network_name: String,
    /// Connection settings passed to the experiment container.
    #[serde(default)]
    pub connection_env: BTreeMap<String, String>,
}

pub fn network_name(project: &ProjectId) -> String {
    format!("reprokit-{project}")
}

pub fn plan_environment(request: &EnvironmentRequest, project: &ProjectId) -> Result<EnvironmentPlan> {
    plan_environment_with(request, project, &SpecOptions::default())
}

pub fn plan_environment_with(
    request: &EnvironmentRequest,
    project: &ProjectId,
    opts: &SpecOptions<'_>,
) -> Result<EnvironmentPlan> {
    let main_spec = generate_spec_with(request, opts)?;
    let mut sidecars = Vec::new();
    let mut connection_env = BTreeMap::new();
    if let Some(db) = &request.database {
        let info = db.engine.info();
        let version = if db.version.trim().is_empty() {
            info.versions[0].to_string()
        } else {
            db.version.trim().to_string()
        };
        if !info.versions.contains(&version.as_str()) {
            return Err(Error::NotSupported(format!(
                "{:?} version {version} (supported: {})",
                db.engine,
                info.versions.join(", ")
            )));
        }
        if db.database_name.trim().is_empty() {
            return Err(Error::validation("database name must not be empty"));
        }
        if db.engine == DatabaseEngine::SQLite {
            if db.credentials.is_some() {
                return Err(Error::validation("SQLite databases take no credentials"));
            }
            connection_env.insert("DB_ENGINE".into(), "sqlite".into());
            connection_env.insert("DB_PATH".into(), db.database_name.clone());
        } else {
            let creds = db
                .credentials
                .as_ref()
                .ok_or_else(|| Error::validation(format!("{:?} requires credentials", db.engine)))?;
            let alias = db.engine.alias().to_string();
            let mut env = BTreeMap::new();
            match db.engine {
                DatabaseEngine::PostgreSQL => {
                    env.insert("POSTGRES_USER".into(), creds.user.clone());
                    env.insert("POSTGRES_PASSWORD".into(), creds.secret.clone());
                    env.insert("POSTGRES_DB".into(), db.database_name.clone());
                }
                DatabaseEngine::MySQL => {
                    env.insert("MYSQL_USER".into(), creds.user.clone());
                    env.insert("MYSQL_PASSWORD".into(), creds.secret.clone());
                    env.insert("MYSQL_ROOT_PASSWORD".into(), creds.secret.clone());
                    env.insert("MYSQL_DATABASE".into(), db.database_name.clone());
                }
                DatabaseEngine::Mongo => {
                    env.insert("MONGO_INITDB_ROOT_USERNAME".into(), creds.user.clone());
                    env.insert("MONGO_INITDB_ROOT_PASSWORD".into(), creds.secret.clone());
                    env.insert("MONGO_INITDB_DATABASE".into(), db.database_name.clone());
                }
                DatabaseEngine::SQLite => unreachable!(),
            }
            connection_env.insert("DB_ENGINE".into(), alias.clone());
            connection_env.insert("DB_HOST".into(), alias.clone());
            connection_env.insert("DB_PORT".into(), info.port.to_string());
            connection_env.insert("DB_NAME".into(), db.database_name.clone());
            connection_env.insert("DB_USER".into(), creds.user.clone());
            connection_env.insert("DB_PASSWORD".into(), creds.secret.clone());
            sidecars.push(Sidecar {
                image: format!("{}:{version}", info.image),
                env,
                alias,
                port: info.port,
                init_scripts: db.init_scripts.clone(),
            });
        }
    }
    Ok(EnvironmentPlan {
        main_spec,
        sidecars,
        network_name: network_name(project),
        connection_env,
    })
}
