//! Static dependency inference for Python (including notebooks) and R.
//!
//! Imports are found by a small lexer that skips strings and comments and
//! joins bracketed and backslash-continued lines; conditional imports are
//! included. Top-level names are classified as local (a sibling module or
//! package in the tree), builtin (standard library / base R) or external.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Language;
use crate::store::FileNode;

const PYTHON_STDLIB: &str = include_str!("../data/python_stdlib.txt");
const R_BASE: &str = include_str!("../data/r_base.txt");
const IMPORT_ALIASES: &str = include_str!("../data/import_aliases.toml");

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "camelCase")]
pub enum ModuleId {
    /// A file or folder of the project tree.
    File(String),
    External(String),
    Builtin(String),
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleId::File(p) => write!(f, "file:{p}"),
            ModuleId::External(n) => write!(f, "external:{n}"),
            ModuleId::Builtin(n) => write!(f, "builtin:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EdgeKind {
    Import,
    SourceInclude,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: ModuleId,
    pub to: ModuleId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackageReq {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version_constraint: Option<String>,
    pub language: Language,
}

impl PackageReq {
    pub fn new(name: &str, language: Language) -> Self {
        let name = name.trim();
        PackageReq {
            name: if language == Language::Python {
                name.to_ascii_lowercase()
            } else {
                name.to_string()
            },
            version_constraint: None,
            language,
        }
    }

    pub fn with_constraint(mut self, constraint: impl Into<String>) -> Self {
        self.version_constraint = Some(constraint.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DependencyGraph {
    pub nodes: BTreeSet<ModuleId>,
    pub edges: BTreeSet<Edge>,
    pub externals: BTreeSet<PackageReq>,
    pub warnings: Vec<String>,
}

impl DependencyGraph {
    pub fn external_names(&self) -> BTreeSet<String> {
        self.externals.iter().map(|r| r.name.clone()).collect()
    }
}

struct Tables {
    python_stdlib: HashSet<String>,
    r_base: HashSet<String>,
    python_aliases: HashMap<String, String>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let list = |s: &str| {
            s.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect::<HashSet<_>>()
        };
        #[derive(Deserialize)]
        struct Aliases {
            python: HashMap<String, String>,
        }
        let aliases: Aliases = toml::from_str(IMPORT_ALIASES).expect("alias table is valid");
        Tables {
            python_stdlib: list(PYTHON_STDLIB),
            r_base: list(R_BASE),
            python_aliases: aliases.python,
        }
    })
}

/// Installable package name for a Python top-level import name.
pub fn python_package_for_import(import_name: &str) -> String {
    tables()
        .python_aliases
        .get(import_name)
        .cloned()
        .unwrap_or_else(|| import_name.to_string())
}

pub fn is_python_stdlib(name: &str) -> bool {
    tables().python_stdlib.contains(name)
}

/// Build the dependency graph of the files under `files_root`.
pub fn build_graph(files_root: &Path, tree: &[FileNode], language: Language) -> Result<DependencyGraph> {
    build_graph_with(tree, language, |path| std::fs::read(files_root.join(path)))
}

/// Like [`build_graph`] with file contents supplied by `read`.
pub fn build_graph_with(
    tree: &[FileNode],
    language: Language,
    read: impl Fn(&str) -> io::Result<Vec<u8>>,
) -> Result<DependencyGraph> {
    let index = TreeIndex::new(tree);
    let mut graph = DependencyGraph::default();
    match language {
        Language::Python | Language::JupyterNotebook => {
            for node in index.sorted_files() {
                let lower = node.to_ascii_lowercase();
                let source = if lower.ends_with(".py") {
                    read_text(&read, node, &mut graph)
                } else if lower.ends_with(".ipynb") {
                    read_text(&read, node, &mut graph).and_then(|text| {
                        notebook_code(&text)
                            .map_err(|e| graph.warnings.push(format!("{node}: {e}")))
                            .ok()
                    })
                } else {
                    continue;
                };
                let Some(source) = source else { continue };
                let from = ModuleId::File(node.to_string());
                graph.nodes.insert(from.clone());
                for import in python_imports(&source) {
                    let to = index.resolve_python(node, &import);
                    if let Some(to) = to {
                        if let ModuleId::External(name) = &to {
                            graph.externals.insert(PackageReq::new(name, Language::Python));
                        }
                        graph.nodes.insert(to.clone());
                        graph.edges.insert(Edge {
                            from: from.clone(),
                            to,
                            kind: EdgeKind::Import,
                        });
                    }
                }
            }
        }
        Language::R => {
            for node in index.sorted_files() {
                if !node.to_ascii_lowercase().ends_with(".r") {
                    continue;
                }
                let Some(source) = read_text(&read, node, &mut graph) else { continue };
                let from = ModuleId::File(node.to_string());
                graph.nodes.insert(from.clone());
                for stmt in r_statements(&source) {
                    let (to, kind) = match stmt {
                        RStatement::Library(name) => (index.resolve_r_package(&name), EdgeKind::Import),
                        RStatement::Source(path) => match index.resolve_r_source(node, &path) {
                            Some(to) => (to, EdgeKind::SourceInclude),
                            None => {
                                graph.warnings.push(format!("{node}: source({path:?}) not in tree"));
                                continue;
                            }
                        },
                    };
                    if let ModuleId::External(name) = &to {
                        graph.externals.insert(PackageReq::new(name, Language::R));
                    }
                    graph.nodes.insert(to.clone());
                    graph.edges.insert(Edge {
                        from: from.clone(),
                        to,
                        kind,
                    });
                }
            }
        }
        other => {
            return Err(Error::NotSupported(format!(
                "dependency inference for {other}; declare dependencies in a manifest file"
            )))
        }
    }
    Ok(graph)
}

fn read_text(
    read: &impl Fn(&str) -> io::Result<Vec<u8>>,
    path: &str,
    graph: &mut DependencyGraph,
) -> Option<String> {
    match read(path) {
        Ok(bytes) => Some(String::from_utf8_lossy(&bytes).into_owned()),
        Err(e) => {
            log::warn!("skipping unreadable {path}: {e}");
            graph.warnings.push(format!("{path}: unreadable: {e}"));
            None
        }
    }
}

struct TreeIndex<'a> {
    files: BTreeSet<&'a str>,
    folders: BTreeSet<&'a str>,
}

impl<'a> TreeIndex<'a> {
    fn new(tree: &'a [FileNode]) -> Self {
        let mut files = BTreeSet::new();
        let mut folders = BTreeSet::new();
        for n in tree {
            if n.is_file() {
                files.insert(n.path.as_str());
            } else {
                folders.insert(n.path.as_str());
            }
        }
        TreeIndex { files, folders }
    }

    fn sorted_files(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.files.iter().copied()
    }

    fn module_at(&self, dir: &str, name: &str) -> Option<ModuleId> {
        let base = join(dir, name);
        let file = format!("{base}.py");
        if self.files.contains(file.as_str()) {
            return Some(ModuleId::File(file));
        }
        if self.folders.contains(base.as_str()) {
            return Some(ModuleId::File(base));
        }
        None
    }

    fn resolve_python(&self, importer: &str, import: &PyImport) -> Option<ModuleId> {
        let dir = parent(importer);
        if import.level > 0 {
            let mut base = dir.to_string();
            for _ in 1..import.level {
                base = parent(&base).to_string();
            }
            return match import.module.split('.').next().filter(|s| !s.is_empty()) {
                Some(first) => self.module_at(&base, first),
                None if base.is_empty() => None,
                None => Some(ModuleId::File(base)),
            };
        }
        let top = import.module.split('.').next()?;
        if let Some(local) = self.module_at(dir, top).or_else(|| self.module_at("", top)) {
            return Some(local);
        }
        if is_python_stdlib(top) {
            return Some(ModuleId::Builtin(top.to_string()));
        }
        Some(ModuleId::External(python_package_for_import(top).to_ascii_lowercase()))
    }

    fn resolve_r_package(&self, name: &str) -> ModuleId {
        let local_file = self.files.iter().find(|f| {
            let fname = f.rsplit('/').next().unwrap_or(f);
            fname
                .rsplit_once('.')
                .is_some_and(|(stem, ext)| stem == name && ext.eq_ignore_ascii_case("r"))
        });
        if let Some(f) = local_file {
            return ModuleId::File(f.to_string());
        }
        let local_pkg = self
            .folders
            .iter()
            .find(|d| d.rsplit('/').next() == Some(name) && self.files.contains(join(d, "DESCRIPTION").as_str()));
        if let Some(d) = local_pkg {
            return ModuleId::File(d.to_string());
        }
        if tables().r_base.contains(name) {
            return ModuleId::Builtin(name.to_string());
        }
        ModuleId::External(name.to_string())
    }

    fn resolve_r_source(&self, importer: &str, path: &str) -> Option<ModuleId> {
        let cleaned = path.trim_start_matches("./");
        [join(parent(importer), cleaned), cleaned.to_string()]
            .into_iter()
            .find(|p| self.files.contains(p.as_str()))
            .map(ModuleId::File)
    }
}

fn parent(path: &str) -> &str {
    path.rsplit_once('/').map(|(p, _)| p).unwrap_or("")
}

fn join(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        name.to_string()
    } else {
        format!("{dir}/{name}")
    }
}

/// One `import` target: `module` is the dotted name without leading dots;
/// `level` is the number of leading dots of a relative import.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyImport {
    pub module: String,
    pub level: usize,
}

/// Logical source lines with strings blanked and comments removed.
fn python_logical_lines(source: &str) -> Vec<String> {
    let mut lines = Vec::new();
    let mut current = String::new();
    let mut depth: usize = 0;
    let chars: Vec<char> = source.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '"' | '\'' => {
                let triple = i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c;
                let quote_len = if triple { 3 } else { 1 };
                i += quote_len;
                loop {
                    if i >= chars.len() {
                        break;
                    }
                    if chars[i] == '\\' {
                        i += 2;
                        continue;
                    }
                    if !triple && chars[i] == '\n' {
                        break;
                    }
                    if chars[i] == c && (!triple || (i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c)) {
                        i += quote_len;
                        break;
                    }
                    i += 1;
                }
                current.push_str("\"\"");
                continue;
            }
            '\\' if i + 1 < chars.len() && chars[i + 1] == '\n' => {
                current.push(' ');
                i += 2;
                continue;
            }
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth = depth.saturating_sub(1),
            '\n' => {
                if depth == 0 {
                    lines.push(std::mem::take(&mut current));
                } else {
                    current.push(' ');
                }
                i += 1;
                continue;
            }
            _ => {}
        }
        current.push(c);
        i += 1;
    }
    if !current.trim().is_empty() {
        lines.push(current);
    }
    lines
}

const COMPOUND_KEYWORDS: [&str; 12] = [
    "if", "elif", "else", "try", "except", "finally", "with", "for", "while", "def", "class", "async",
];

/// Byte offset of the first `:` outside brackets.
fn header_colon(stmt: &str) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in stmt.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth = depth.saturating_sub(1),
            ':' if depth == 0 => return Some(i),
            _ => {}
        }
    }
    None
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn is_dotted_name(s: &str) -> bool {
    !s.is_empty() && s.split('.').all(is_identifier)
}

fn simple_statements(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for stmt in line.split(';') {
        let mut stmt = stmt.trim();
        // `try: import x`, `def f(a: int): import y`
        loop {
            let first = stmt.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or("");
            if COMPOUND_KEYWORDS.contains(&first) {
                if let Some(i) = header_colon(stmt) {
                    stmt = stmt[i + 1..].trim();
                    continue;
                }
            }
            break;
        }
        if !stmt.is_empty() {
            out.push(stmt);
        }
    }
    out
}

/// All import targets of a Python source, in source order.
pub fn python_imports(source: &str) -> Vec<PyImport> {
    let mut out = Vec::new();
    for line in python_logical_lines(source) {
        for stmt in simple_statements(&line) {
            if let Some(rest) = stmt.strip_prefix("import") {
                if !rest.starts_with(char::is_whitespace) {
                    continue;
                }
                for part in rest.split(',') {
                    let name = part.split_whitespace().next().unwrap_or("");
                    if is_dotted_name(name) {
                        out.push(PyImport {
                            module: name.to_string(),
                            level: 0,
                        });
                    }
                }
            } else if let Some(rest) = stmt.strip_prefix("from") {
                if !rest.starts_with(char::is_whitespace) {
                    continue;
                }
                let mut words = rest.split_whitespace();
                let Some(target) = words.next() else { continue };
                if words.next() != Some("import") {
                    continue;
                }
                let level = target.chars().take_while(|&c| c == '.').count();
                let module = &target[level..];
                if (module.is_empty() && level > 0) || is_dotted_name(module) {
                    out.push(PyImport {
                        module: module.to_string(),
                        level,
                    });
                }
            }
        }
    }
    out
}

/// Concatenated source of a notebook's code cells, with IPython magics and
/// shell escapes removed.
pub fn notebook_code(json: &str) -> std::result::Result<String, String> {
    let nb: serde_json::Value = serde_json::from_str(json).map_err(|e| format!("invalid notebook: {e}"))?;
    let cells = nb
        .get("cells")
        .and_then(|c| c.as_array())
        .ok_or("notebook has no cells array")?;
    let mut code = String::new();
    for cell in cells {
        if cell.get("cell_type").and_then(|t| t.as_str()) != Some("code") {
            continue;
        }
        let source = match cell.get("source") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Array(parts)) => parts.iter().filter_map(|p| p.as_str()).collect(),
            _ => continue,
        };
        for line in source.lines() {
            let t = line.trim_start();
            if t.starts_with('%') || t.starts_with('!') {
                continue;
            }
            code.push_str(line);
            code.push('\n');
        }
        code.push('\n');
    }
    Ok(code)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RStatement {
    Library(String),
    Source(String),
}

fn strip_r_comments(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    for line in source.lines() {
        let mut quote: Option<char> = None;
        let mut prev = '\0';
        for c in line.chars() {
            match quote {
                Some(q) if c == q && prev != '\\' => quote = None,
                Some(_) => {}
                None if c == '"' || c == '\'' => quote = Some(c),
                None if c == '#' => break,
                None => {}
            }
            out.push(c);
            prev = c;
        }
        out.push('\n');
    }
    out
}

fn r_statements(source: &str) -> Vec<RStatement> {
    let text = strip_r_comments(source);
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if !(c.is_ascii_alphabetic() || c == b'.') || (i > 0 && is_r_ident_byte(bytes[i - 1])) {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && is_r_ident_byte(bytes[i]) {
            i += 1;
        }
        let word = &text[start..i];
        if !matches!(word, "library" | "require" | "requireNamespace" | "source") {
            continue;
        }
        let mut j = i;
        while j < bytes.len() && bytes[j].is_ascii_whitespace() {
            j += 1;
        }
        if j >= bytes.len() || bytes[j] != b'(' {
            continue;
        }
        let Some(close) = text[j..].find(')') else { break };
        let args = &text[j + 1..j + close];
        i = j + close + 1;
        let mut parts = args.split(',');
        let first = parts.next().unwrap_or("").trim();
        let quoted = first.len() >= 2
            && (first.starts_with('"') && first.ends_with('"') || first.starts_with('\'') && first.ends_with('\''));
        let value = if quoted { &first[1..first.len() - 1] } else { first };
        if value.is_empty() {
            continue;
        }
        if word == "source" {
            if quoted {
                out.push(RStatement::Source(value.to_string()));
            }
            continue;
        }
        let character_only = parts.any(|p| {
            let p = p.replace(' ', "");
            p == "character.only=TRUE" || p == "character.only=T"
        });
        // requireNamespace takes a string; library/require take a bare name
        // unless character.only is set (then the argument is a variable)
        if character_only && !quoted {
            continue;
        }
        if value.bytes().all(is_r_ident_byte) {
            out.push(RStatement::Library(value.to_string()));
        }
    }
    out
}

fn is_r_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'.' || b == b'_'
}

/// Path of `requirements.txt` at the tree root, if present.
pub fn detect_requirements_file(tree: &[FileNode]) -> Option<String> {
    tree.iter()
        .find(|n| n.is_file() && n.path == "requirements.txt")
        .map(|n| n.path.clone())
}

/// Render a one-requirement-per-line manifest, sorted lexicographically.
pub fn emit_requirements<'a>(reqs: impl IntoIterator<Item = &'a PackageReq>) -> Result<String> {
    let reqs: Vec<&PackageReq> = reqs.into_iter().collect();
    if let Some(first) = reqs.first() {
        if let Some(other) = reqs.iter().find(|r| r.language != first.language) {
            return Err(Error::validation(format!(
                "mixed requirement languages: {} and {}",
                first.language, other.language
            )));
        }
    }
    let mut lines: Vec<String> = reqs
        .iter()
        .map(|r| format!("{}{}", r.name, r.version_constraint.as_deref().unwrap_or("")))
        .collect();
    lines.sort();
    lines.dedup();
    Ok(lines.iter().map(|l| format!("{l}\n")).collect())
}

/// Parse a requirements manifest. Comments, blank lines and option lines
/// (`-r`, `--index-url`) are ignored; anything after the name is kept as
/// the constraint verbatim.
pub fn parse_requirements(text: &str, language: Language) -> BTreeSet<PackageReq> {
    let mut out = BTreeSet::new();
    for line in text.lines() {
        let line = line.split(" #").next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('-') {
            continue;
        }
        let end = line
            .find(|c: char| !(c.is_ascii_alphanumeric() || "._-[],".contains(c)))
            .unwrap_or(line.len());
        let (name, rest) = line.split_at(end);
        if name.is_empty() {
            continue;
        }
        let mut req = PackageReq::new(name, language);
        let rest = rest.trim();
        if !rest.is_empty() {
            req = req.with_constraint(rest);
        }
        out.insert(req);
    }
    out
}

/// Externals of several languages grouped per language.
pub fn externals_by_language(graphs: &[DependencyGraph]) -> BTreeMap<Language, BTreeSet<PackageReq>> {
    let mut out: BTreeMap<Language, BTreeSet<PackageReq>> = BTreeMap::new();
    for g in graphs {
        for r in &g.externals {
            out.entry(r.language).or_default().insert(r.clone());
        }
    }
    out
}
