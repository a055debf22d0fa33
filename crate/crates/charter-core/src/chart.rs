//! Charts: the unit of packaging. Scaffold, load, lint, pack and unpack.

use crate::manifest;
use crate::template::{self, RenderContext, TemplateSet};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use semver::Version;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChartError {
    #[error("path already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error("not a chart (missing Chart.yaml): {0}")]
    NotAChart(PathBuf),
    #[error("malformed chart metadata: {0}")]
    MalformedMetadata(String),
    #[error("lint failed:\n{0}")]
    LintFailed(LintReport),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// `application` charts render manifests; `library` charts only contribute
/// template definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    #[default]
    Application,
    Library,
}

/// A version constraint: exact (`1.2.3`) or caret (`^1.2`). Caret on a 0.x
/// version pins the minor (`^0.1` admits 0.1.*, not 0.2.*).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VersionConstraint {
    Exact(Version),
    Caret { parts: Vec<u64> },
}

impl VersionConstraint {
    pub fn parse(s: &str) -> Result<Self, ChartError> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix('^') {
            let parts: Result<Vec<u64>, _> = rest.split('.').map(|p| p.parse::<u64>()).collect();
            let parts = parts
                .map_err(|_| ChartError::MalformedMetadata(format!("bad constraint `{s}`")))?;
            if parts.is_empty() || parts.len() > 3 {
                return Err(ChartError::MalformedMetadata(format!("bad constraint `{s}`")));
            }
            Ok(VersionConstraint::Caret { parts })
        } else {
            let v = Version::parse(s)
                .map_err(|e| ChartError::MalformedMetadata(format!("bad version `{s}`: {e}")))?;
            Ok(VersionConstraint::Exact(v))
        }
    }

    pub fn matches(&self, v: &Version) -> bool {
        match self {
            VersionConstraint::Exact(e) => v == e,
            VersionConstraint::Caret { parts } => {
                let get = |i: usize| parts.get(i).copied().unwrap_or(0);
                let lower = Version::new(get(0), get(1), get(2));
                if *v < lower {
                    return false;
                }
                // Upper bound bumps the leftmost nonzero given component,
                // or the last given component when all are zero.
                let pin = parts
                    .iter()
                    .position(|p| *p > 0)
                    .unwrap_or(parts.len() - 1);
                let upper = match pin {
                    0 => Version::new(get(0) + 1, 0, 0),
                    1 => Version::new(get(0), get(1) + 1, 0),
                    _ => Version::new(get(0), get(1), get(2) + 1),
                };
                *v < upper
            }
        }
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionConstraint::Exact(v) => write!(f, "{v}"),
            VersionConstraint::Caret { parts } => {
                let joined: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "^{}", joined.join("."))
            }
        }
    }
}

/// A dependency declared in Chart.yaml.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyRef {
    pub name: String,
    pub version_constraint: VersionConstraint,
    pub repository: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartMetadata {
    pub name: String,
    pub version: Version,
    pub description: Option<String>,
    pub kind: ChartKind,
    pub dependencies: Vec<DependencyRef>,
}

/// On-disk schema of Chart.yaml.
#[derive(Debug, Serialize, Deserialize)]
struct ChartYaml {
    name: String,
    version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default)]
    kind: ChartKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    dependencies: Vec<DependencyYaml>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DependencyYaml {
    name: String,
    version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    repository: Option<String>,
}

impl ChartMetadata {
    fn from_yaml(text: &str) -> Result<Self, ChartError> {
        let raw: ChartYaml = serde_yaml::from_str(text)
            .map_err(|e| ChartError::MalformedMetadata(e.to_string()))?;
        let version = Version::parse(&raw.version)
            .map_err(|e| ChartError::MalformedMetadata(format!("bad version: {e}")))?;
        let mut dependencies = Vec::new();
        for d in raw.dependencies {
            if d.name.is_empty() {
                return Err(ChartError::MalformedMetadata("dependency with empty name".into()));
            }
            dependencies.push(DependencyRef {
                name: d.name,
                version_constraint: VersionConstraint::parse(&d.version)?,
                repository: d.repository,
            });
        }
        Ok(ChartMetadata {
            name: raw.name,
            version,
            description: raw.description,
            kind: raw.kind,
            dependencies,
        })
    }

    fn to_yaml(&self) -> String {
        let raw = ChartYaml {
            name: self.name.clone(),
            version: self.version.to_string(),
            description: self.description.clone(),
            kind: self.kind,
            dependencies: self
                .dependencies
                .iter()
                .map(|d| DependencyYaml {
                    name: d.name.clone(),
                    version: d.version_constraint.to_string(),
                    repository: d.repository.clone(),
                })
                .collect(),
        };
        serde_yaml::to_string(&raw).expect("metadata serializes")
    }
}

/// Chart names: lowercase alphanumerics and interior dashes.
pub fn valid_chart_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
        && !name.starts_with('-')
        && !name.ends_with('-')
}

/// Metadata, templates, default values and bundled dependency charts.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub metadata: ChartMetadata,
    pub default_values: Value,
    /// Template path (relative, below `templates/`) to source text.
    pub templates: BTreeMap<String, String>,
    pub bundled_charts: Vec<Chart>,
    pub extra_files: BTreeMap<String, Vec<u8>>,
}

/// A packed chart: gzip-compressed tar bytes plus their digest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartArchive {
    pub bytes: Vec<u8>,
    pub digest: String,
    pub filename: String,
}

impl ChartArchive {
    pub fn from_bytes(bytes: Vec<u8>, filename: String) -> Self {
        let digest = hex::encode(Sha256::digest(&bytes));
        ChartArchive {
            bytes,
            digest,
            filename,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone)]
pub struct LintFinding {
    pub severity: Severity,
    pub rule: &'static str,
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LintReport {
    pub findings: Vec<LintFinding>,
}

impl LintReport {
    fn error(&mut self, rule: &'static str, path: &str, message: String) {
        self.findings.push(LintFinding {
            severity: Severity::Error,
            rule,
            path: path.to_string(),
            message,
        });
    }

    pub fn errors(&self) -> impl Iterator<Item = &LintFinding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

impl fmt::Display for LintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            let sev = match finding.severity {
                Severity::Error => "ERROR",
                Severity::Warning => "WARN",
            };
            writeln!(f, "[{sev}] {} {}: {}", finding.rule, finding.path, finding.message)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scaffold.

const SCAFFOLD_VALUES: &str = "replicaCount: 1\nimage:\n  repository: nginx\n  tag: \"1.27\"\nservice:\n  type: ClusterIP\n  port: 80\n";

const SCAFFOLD_HELPERS: &str = r#"{{- define "app.name" -}}{{ .Chart.Name }}{{- end -}}
"#;

const SCAFFOLD_DEPLOYMENT: &str = r#"apiVersion: apps/v1
kind: Deployment
metadata:
  name: {{ .Release.Name }}-{{ include "app.name" . }}
  labels:
    app: {{ include "app.name" . }}
spec:
  replicas: {{ .Values.replicaCount | default 1 }}
  selector:
    matchLabels:
      app: {{ include "app.name" . }}
  template:
    metadata:
      labels:
        app: {{ include "app.name" . }}
    spec:
      containers:
        - name: {{ include "app.name" . }}
          image: {{ printf "%s:%s" .Values.image.repository .Values.image.tag }}
          ports:
            - containerPort: {{ .Values.service.port }}
"#;

const SCAFFOLD_SERVICE: &str = r#"apiVersion: v1
kind: Service
metadata:
  name: {{ .Release.Name }}-{{ include "app.name" . }}
  labels:
    app: {{ include "app.name" . }}
spec:
  type: {{ .Values.service.type }}
  ports:
    - port: {{ .Values.service.port }}
  selector:
    app: {{ include "app.name" . }}
"#;

/// Write the canonical chart layout for a new chart named `name` under
/// `target_dir/name`.
pub fn scaffold(name: &str, target_dir: &Path) -> Result<Chart, ChartError> {
    if !valid_chart_name(name) {
        return Err(ChartError::MalformedMetadata(format!(
            "invalid chart name `{name}`"
        )));
    }
    let root = target_dir.join(name);
    if root.exists() {
        return Err(ChartError::AlreadyExists(root));
    }
    fs::create_dir_all(root.join("templates"))?;
    fs::create_dir_all(root.join("charts"))?;
    let meta = format!("name: {name}\nversion: 0.1.0\ndescription: A charter chart for {name}\nkind: application\n");
    fs::write(root.join("Chart.yaml"), meta)?;
    fs::write(root.join("values.yaml"), SCAFFOLD_VALUES)?;
    fs::write(root.join("templates/_helpers.tpl"), SCAFFOLD_HELPERS)?;
    fs::write(root.join("templates/deployment.yaml"), SCAFFOLD_DEPLOYMENT)?;
    fs::write(root.join("templates/service.yaml"), SCAFFOLD_SERVICE)?;
    fs::write(
        root.join("README.md"),
        format!("# {name}\n\nInstall with `charter install <release> {name}`.\n"),
    )?;
    load(&root)
}

// ---------------------------------------------------------------------------
// Load: directory or archive.

/// Load a chart from a directory or a `.tgz` archive; bundled charts under
/// `charts/` load recursively.
pub fn load(path: &Path) -> Result<Chart, ChartError> {
    if path.is_dir() {
        let files = read_dir_files(path)?;
        if !files.contains_key("Chart.yaml") {
            return Err(ChartError::NotAChart(path.to_path_buf()));
        }
        from_file_map(&files)
    } else if path.is_file() {
        let bytes = fs::read(path)?;
        let filename = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        unpack(&ChartArchive::from_bytes(bytes, filename))
    } else {
        Err(ChartError::NotAChart(path.to_path_buf()))
    }
}

fn read_dir_files(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, ChartError> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("entry under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                files.insert(rel, fs::read(&path)?);
            }
        }
    }
    Ok(files)
}

/// Build a chart from a relative-path file map (shared by directory and
/// archive loading).
fn from_file_map(files: &BTreeMap<String, Vec<u8>>) -> Result<Chart, ChartError> {
    let meta_bytes = files
        .get("Chart.yaml")
        .ok_or_else(|| ChartError::NotAChart(PathBuf::from("Chart.yaml")))?;
    let meta_text = String::from_utf8(meta_bytes.clone())
        .map_err(|_| ChartError::MalformedMetadata("Chart.yaml is not UTF-8".into()))?;
    let metadata = ChartMetadata::from_yaml(&meta_text)?;

    let default_values = match files.get("values.yaml") {
        Some(bytes) => {
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| ChartError::MalformedMetadata("values.yaml is not UTF-8".into()))?;
            let v: Value = serde_yaml::from_str(&text)
                .map_err(|e| ChartError::MalformedMetadata(format!("values.yaml: {e}")))?;
            v
        }
        None => Value::Null,
    };

    let mut templates = BTreeMap::new();
    let mut extra_files = BTreeMap::new();
    let mut bundled: BTreeMap<String, BTreeMap<String, Vec<u8>>> = BTreeMap::new();
    for (path, bytes) in files {
        if path == "Chart.yaml" || path == "values.yaml" {
            continue;
        }
        if let Some(rel) = path.strip_prefix("templates/") {
            let text = String::from_utf8(bytes.clone()).map_err(|_| {
                ChartError::MalformedMetadata(format!("template {path} is not UTF-8"))
            })?;
            templates.insert(rel.to_string(), text);
        } else if let Some(rel) = path.strip_prefix("charts/") {
            if let Some((dep, sub)) = rel.split_once('/') {
                bundled
                    .entry(dep.to_string())
                    .or_default()
                    .insert(sub.to_string(), bytes.clone());
            }
        } else {
            extra_files.insert(path.clone(), bytes.clone());
        }
    }

    let bundled_charts = bundled
        .into_values()
        .map(|sub| from_file_map(&sub))
        .collect::<Result<Vec<Chart>, ChartError>>()?;

    Ok(Chart {
        metadata,
        default_values,
        templates,
        bundled_charts,
        extra_files,
    })
}

/// Flatten a chart back to a relative-path file map under `prefix`.
fn chart_files(chart: &Chart, prefix: &str, out: &mut BTreeMap<String, Vec<u8>>) {
    out.insert(
        format!("{prefix}Chart.yaml"),
        chart.metadata.to_yaml().into_bytes(),
    );
    let values_text = serde_yaml::to_string(&chart.default_values).expect("values serialize");
    out.insert(format!("{prefix}values.yaml"), values_text.into_bytes());
    for (path, text) in &chart.templates {
        out.insert(format!("{prefix}templates/{path}"), text.clone().into_bytes());
    }
    for (path, bytes) in &chart.extra_files {
        out.insert(format!("{prefix}{path}"), bytes.clone());
    }
    for dep in &chart.bundled_charts {
        chart_files(dep, &format!("{prefix}charts/{}/", dep.metadata.name), out);
    }
}

/// Write a chart's files to `dir` (the chart root).
pub fn write_to_dir(chart: &Chart, dir: &Path) -> Result<(), ChartError> {
    let mut files = BTreeMap::new();
    chart_files(chart, "", &mut files);
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pack / unpack.

/// Pack a lint-clean chart into a deterministic gzip tar: entries sorted by
/// path, epoch-zero timestamps, zeroed ownership. The same chart always
/// yields byte-identical archives.
pub fn pack(chart: &Chart) -> Result<ChartArchive, ChartError> {
    let report = lint(chart);
    if report.has_errors() {
        return Err(ChartError::LintFailed(report));
    }
    let mut files = BTreeMap::new();
    let top = format!("{}/", chart.metadata.name);
    chart_files(chart, &top, &mut files);

    let encoder = GzEncoder::new(Vec::new(), Compression::default());
    let mut builder = tar::Builder::new(encoder);
    for (path, bytes) in &files {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_cksum();
        builder
            .append_data(&mut header, path, bytes.as_slice())
            .map_err(ChartError::Io)?;
    }
    let encoder = builder.into_inner().map_err(ChartError::Io)?;
    let bytes = encoder.finish().map_err(ChartError::Io)?;
    let filename = format!("{}-{}.tgz", chart.metadata.name, chart.metadata.version);
    Ok(ChartArchive::from_bytes(bytes, filename))
}

/// Unpack an archive back into a chart.
pub fn unpack(archive: &ChartArchive) -> Result<Chart, ChartError> {
    let decoder = GzDecoder::new(archive.bytes.as_slice());
    let mut tar = tar::Archive::new(decoder);
    let mut files = BTreeMap::new();
    let entries = tar.entries().map_err(ChartError::Io)?;
    for entry in entries {
        let mut entry = entry.map_err(ChartError::Io)?;
        let path = entry
            .path()
            .map_err(ChartError::Io)?
            .to_string_lossy()
            .into_owned();
        // strip the single top-level directory (the chart name)
        let rel = match path.split_once('/') {
            Some((_, rest)) if !rest.is_empty() => rest.to_string(),
            _ => continue,
        };
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(ChartError::Io)?;
        files.insert(rel, bytes);
    }
    if !files.contains_key("Chart.yaml") {
        return Err(ChartError::NotAChart(PathBuf::from(&archive.filename)));
    }
    from_file_map(&files)
}

// ---------------------------------------------------------------------------
// Template set assembly and lint.

/// Build the template set for rendering: the chart's own files plus the
/// defines contributed by bundled charts, prefixed by their chart names.
pub fn build_template_set(chart: &Chart) -> Result<TemplateSet, template::TemplateError> {
    let mut set = template::parse_templates(&chart.templates)?;
    for dep in &chart.bundled_charts {
        set.add_library(&dep.metadata.name, &dep.templates)?;
    }
    Ok(set)
}

fn lint_context(chart: &Chart) -> RenderContext {
    RenderContext {
        values: chart.default_values.clone(),
        chart_name: chart.metadata.name.clone(),
        chart_version: chart.metadata.version.to_string(),
        release_name: "release-name".into(),
        release_namespace: "default".into(),
        strict: false,
    }
}

/// Validate a chart: metadata, values, template syntax, a dry-run render
/// with default values, manifest parsing of each output, dependency
/// constraints, and the library-chart restriction.
pub fn lint(chart: &Chart) -> LintReport {
    let mut report = LintReport::default();

    if !valid_chart_name(&chart.metadata.name) {
        report.error(
            "name-format",
            "Chart.yaml",
            format!("invalid chart name `{}`", chart.metadata.name),
        );
    }
    for dep in &chart.metadata.dependencies {
        if dep.name.is_empty() {
            report.error("dependency", "Chart.yaml", "dependency with empty name".into());
        }
    }

    let set = match build_template_set(chart) {
        Ok(set) => set,
        Err(e) => {
            let path = match &e {
                template::TemplateError::TemplateSyntax { file, .. } => {
                    format!("templates/{file}")
                }
                _ => "templates/".to_string(),
            };
            report.error("template-parse", &path, e.to_string());
            return report;
        }
    };

    if chart.metadata.kind == ChartKind::Library {
        let concrete: Vec<&String> = chart
            .templates
            .keys()
            .filter(|p| !p.rsplit('/').next().unwrap_or(p).starts_with('_'))
            .collect();
        for path in concrete {
            report.error(
                "library-no-manifests",
                &format!("templates/{path}"),
                "library chart must not render manifests".into(),
            );
        }
        return report;
    }

    let ctx = lint_context(chart);
    match template::render_chart_templates(&set, &ctx) {
        Ok(rendered) => {
            for (path, text) in rendered {
                if let Err(e) = manifest::parse_manifest_stream(&text) {
                    report.error(
                        "manifest-parse",
                        &format!("templates/{path}"),
                        e.to_string(),
                    );
                }
            }
        }
        Err(e) => {
            let path = match &e {
                template::TemplateError::RenderFailed { path, .. } => {
                    format!("templates/{path}")
                }
                _ => "templates/".to_string(),
            };
            report.error("render", &path, e.to_string());
        }
    }

    report
}
