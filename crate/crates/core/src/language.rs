//! Language inference from file extensions and toolchain resolution.
//!
//! Both tables are data files (`data/languages.toml`,
//! `data/toolchains.toml`) compiled into the binary; [`LanguageTables::load`]
//! replaces either one at runtime.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::store::FileNode;

const LANGUAGES_TOML: &str = include_str!("../data/languages.toml");
const TOOLCHAINS_TOML: &str = include_str!("../data/toolchains.toml");

/// Paths reported per language in a profile.
pub const EVIDENCE_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Language {
    Cpp,
    Perl,
    R,
    JavaMaven,
    Python,
    UnixShell,
    JupyterNotebook,
}

impl Language {
    pub const ALL: [Language; 7] = [
        Language::Cpp,
        Language::Perl,
        Language::R,
        Language::JavaMaven,
        Language::Python,
        Language::UnixShell,
        Language::JupyterNotebook,
    ];

    /// Key used in the data tables.
    pub fn key(self) -> &'static str {
        match self {
            Language::Cpp => "cpp",
            Language::Perl => "perl",
            Language::R => "r",
            Language::JavaMaven => "java-maven",
            Language::Python => "python",
            Language::UnixShell => "unix-shell",
            Language::JupyterNotebook => "jupyter-notebook",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Language::Cpp => "C++",
            Language::Perl => "Perl",
            Language::R => "R",
            Language::JavaMaven => "Java (maven)",
            Language::Python => "Python",
            Language::UnixShell => "Unix Shell",
            Language::JupyterNotebook => "Jupyter Notebook",
        }
    }

    fn from_key(key: &str) -> Option<Language> {
        Language::ALL.into_iter().find(|l| l.key() == key)
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Language {
    type Err = Error;

    /// Accepts display names, table keys and request aliases such as
    /// `"C++"`, `"python"`, `"shell"` or `"java"`.
    fn from_str(s: &str) -> Result<Self> {
        LanguageTables::builtin().language_named(s)
    }
}

impl Serialize for Language {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.display_name())
    }
}

impl<'de> Deserialize<'de> for Language {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LanguageProfile {
    pub languages: BTreeSet<Language>,
    pub evidence: BTreeMap<Language, Vec<String>>,
    /// Files of a known language that cannot be built, e.g. `.java` without
    /// a `pom.xml`.
    pub unsupported: Vec<String>,
    pub unknown_extensions: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Alternative {
    pub link: String,
    pub name: String,
    pub path: String,
    pub priority: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedToolchain {
    pub language: Language,
    pub version_request: String,
    pub packages: Vec<String>,
    pub alternatives: Vec<Alternative>,
    /// Provided by the base image; renders no install directives.
    pub preinstalled: bool,
}

#[derive(Debug, Clone, Deserialize)]
struct LanguagesFile {
    extensions: BTreeMap<String, String>,
    names: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
struct ToolchainEntry {
    default: String,
    tools: Vec<ToolTemplate>,
}

#[derive(Debug, Clone, Deserialize)]
struct ToolTemplate {
    name: String,
    #[serde(default)]
    aliases: Vec<String>,
    packages: Vec<String>,
    #[serde(default)]
    alternatives: Vec<Alternative>,
    #[serde(default)]
    preinstalled: bool,
}

/// Extension and toolchain tables.
#[derive(Debug, Clone)]
pub struct LanguageTables {
    extensions: HashMap<String, Language>,
    names: HashMap<String, Language>,
    toolchains: HashMap<Language, ToolchainEntry>,
}

impl LanguageTables {
    pub fn builtin() -> &'static LanguageTables {
        static TABLES: OnceLock<LanguageTables> = OnceLock::new();
        TABLES.get_or_init(|| {
            LanguageTables::parse(LANGUAGES_TOML, TOOLCHAINS_TOML).expect("builtin tables are valid")
        })
    }

    /// Load tables, replacing the builtin extension and/or toolchain table
    /// with the given files.
    pub fn load(languages: Option<&Path>, toolchains: Option<&Path>) -> Result<LanguageTables> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(Error::at_path(p));
        let langs = match languages {
            Some(p) => read(p)?,
            None => LANGUAGES_TOML.to_string(),
        };
        let tools = match toolchains {
            Some(p) => read(p)?,
            None => TOOLCHAINS_TOML.to_string(),
        };
        LanguageTables::parse(&langs, &tools)
    }

    pub fn parse(languages_toml: &str, toolchains_toml: &str) -> Result<LanguageTables> {
        let langs: LanguagesFile = toml::from_str(languages_toml)
            .map_err(|e| Error::validation(format!("language table: {e}")))?;
        let tools: BTreeMap<String, ToolchainEntry> = toml::from_str(toolchains_toml)
            .map_err(|e| Error::validation(format!("toolchain table: {e}")))?;
        let lang = |key: &str| {
            Language::from_key(key)
                .ok_or_else(|| Error::validation(format!("unknown language key {key:?} in table")))
        };

        let mut extensions = HashMap::new();
        for (ext, key) in &langs.extensions {
            extensions.insert(ext.to_ascii_lowercase(), lang(key)?);
        }
        let mut names = HashMap::new();
        for l in Language::ALL {
            names.insert(l.key().to_string(), l);
            names.insert(l.display_name().to_ascii_lowercase(), l);
        }
        for (key, aliases) in &langs.names {
            let l = lang(key)?;
            for a in aliases {
                names.insert(a.to_ascii_lowercase(), l);
            }
        }
        let mut toolchains = HashMap::new();
        for (key, entry) in tools {
            if entry.tools.is_empty() || entry.tools.iter().any(|t| t.packages.is_empty()) {
                return Err(Error::validation(format!("toolchain {key:?} has no packages")));
            }
            toolchains.insert(lang(&key)?, entry);
        }
        Ok(LanguageTables {
            extensions,
            names,
            toolchains,
        })
    }

    pub fn language_named(&self, name: &str) -> Result<Language> {
        self.names
            .get(&name.trim().to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::validation(format!("unknown language {name:?}")))
    }

    pub fn language_for_extension(&self, ext: &str) -> Option<Language> {
        self.extensions.get(&ext.to_ascii_lowercase()).copied()
    }

    pub fn infer_languages(&self, tree: &[FileNode]) -> LanguageProfile {
        let has_pom = tree
            .iter()
            .any(|n| n.is_file() && n.file_name().eq_ignore_ascii_case("pom.xml"));

        let mut evidence: BTreeMap<Language, BTreeSet<String>> = BTreeMap::new();
        let mut unsupported = BTreeSet::new();
        let mut unknown = BTreeSet::new();
        for node in tree.iter().filter(|n| n.is_file()) {
            let name = node.file_name();
            if has_pom && name.eq_ignore_ascii_case("pom.xml") {
                evidence.entry(Language::JavaMaven).or_default().insert(node.path.clone());
                continue;
            }
            let Some((stem, ext)) = name.rsplit_once('.') else {
                continue;
            };
            if stem.is_empty() {
                // dotfiles such as .gitignore
                continue;
            }
            match self.language_for_extension(ext) {
                Some(Language::JavaMaven) if !has_pom => {
                    unsupported.insert(node.path.clone());
                }
                Some(lang) => {
                    evidence.entry(lang).or_default().insert(node.path.clone());
                }
                None => {
                    unknown.insert(ext.to_ascii_lowercase());
                }
            }
        }
        // a pom.xml alone is not a Java project
        if let Some(java) = evidence.get(&Language::JavaMaven) {
            if java.iter().all(|p| p.to_ascii_lowercase().ends_with("pom.xml")) {
                evidence.remove(&Language::JavaMaven);
            }
        }

        LanguageProfile {
            languages: evidence.keys().copied().collect(),
            evidence: evidence
                .into_iter()
                .map(|(l, paths)| (l, paths.into_iter().take(EVIDENCE_CAP).collect()))
                .collect(),
            unsupported: unsupported.into_iter().collect(),
            unknown_extensions: unknown,
        }
    }

    pub fn resolve_toolchain(
        &self,
        language: Language,
        version_request: Option<&str>,
    ) -> Result<ResolvedToolchain> {
        let entry = self
            .toolchains
            .get(&language)
            .ok_or_else(|| Error::NotSupported(format!("no toolchain table entry for {language}")))?;
        let request = version_request
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .unwrap_or(&entry.default);
        let (tool_name, version) = parse_version_request(request)?;
        let tool = match tool_name {
            None => &entry.tools[0],
            Some(name) => entry
                .tools
                .iter()
                .find(|t| {
                    t.name.eq_ignore_ascii_case(name)
                        || t.aliases.iter().any(|a| a.eq_ignore_ascii_case(name))
                })
                .ok_or_else(|| {
                    Error::validation(format!("unknown tool {name:?} for {language} in {request:?}"))
                })?,
        };
        let fill = |s: &str| s.replace("{version}", version);
        Ok(ResolvedToolchain {
            language,
            version_request: request.to_string(),
            packages: tool.packages.iter().map(|p| fill(p)).collect(),
            alternatives: tool
                .alternatives
                .iter()
                .map(|a| Alternative {
                    link: fill(&a.link),
                    name: fill(&a.name),
                    path: fill(&a.path),
                    priority: a.priority,
                })
                .collect(),
            preinstalled: tool.preinstalled,
        })
    }
}

/// Split `gcc:8`, `python:3.8`, `openjdk-11` or a bare `3.8` into
/// (tool, version).
pub fn parse_version_request(request: &str) -> Result<(Option<&str>, &str)> {
    let bad = || {
        Error::validation(format!(
            "unparseable version {request:?}; expected <tool>:<major[.minor]>"
        ))
    };
    let is_version = |v: &str| {
        let mut parts = v.split('.');
        let major = parts.next().unwrap_or("");
        let minor = parts.next();
        parts.next().is_none()
            && !major.is_empty()
            && major.bytes().all(|b| b.is_ascii_digit())
            && minor.is_none_or(|m| !m.is_empty() && m.bytes().all(|b| b.is_ascii_digit()))
    };
    let is_tool = |t: &str| {
        t.bytes().next().is_some_and(|b| b.is_ascii_alphabetic())
            && t.bytes().all(|b| b.is_ascii_alphanumeric() || b"+-_".contains(&b))
    };

    if is_version(request) {
        return Ok((None, request));
    }
    let split = request
        .rfind(':')
        .or_else(|| request.rfind('-'))
        .ok_or_else(bad)?;
    let (tool, version) = (&request[..split], &request[split + 1..]);
    if is_tool(tool) && is_version(version) {
        Ok((Some(tool), version))
    } else {
        Err(bad())
    }
}

pub fn infer_languages(tree: &[FileNode]) -> LanguageProfile {
    LanguageTables::builtin().infer_languages(tree)
}

pub fn resolve_toolchain(language: Language, version_request: Option<&str>) -> Result<ResolvedToolchain> {
    LanguageTables::builtin().resolve_toolchain(language, version_request)
}
