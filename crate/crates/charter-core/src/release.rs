//! Release lifecycle: values merging, render with an optional post-render
//! hook, ordered apply through the cluster gateway, upgrade diffs, rollback,
//! history and uninstall. Release records are stored as Secret resources in
//! the target namespace so state lives with the cluster.

use crate::chart::{self, Chart};
use crate::gateway::{ClusterClient, GatewayError, ResourceKey};
use crate::manifest::{self, ManifestDocument};
use crate::provenance::{self, ProvenanceError, ProvenanceRecord};
use crate::template::{self, RenderContext};
use crate::ChartArchive;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

const POST_RENDER_TIMEOUT: Duration = Duration::from_secs(30);
const POST_RENDER_OUTPUT_CAP: usize = 10 * 1024 * 1024;
const RECORD_PREFIX: &str = "charter.release.";
const RECORD_LABEL: &str = "charter-release";

pub type Values = Value;

#[derive(Debug, Error)]
pub enum ReleaseError {
    #[error("malformed --set pair `{0}` (expected k.path=value)")]
    MalformedSetPair(String),
    #[error("malformed values file: {0}")]
    MalformedValuesFile(String),
    #[error("render failed: {0}")]
    RenderFailed(String),
    #[error("unsatisfied dependencies: {0:?}")]
    DependencyUnsatisfied(Vec<String>),
    #[error("post-renderer failed with exit code {code}: {stderr}")]
    PostRenderFailed { code: i32, stderr: String },
    #[error("post-renderer output is not a valid manifest stream: {0}")]
    PostRenderMalformed(String),
    #[error("release `{name}` already exists in namespace `{namespace}`")]
    ReleaseExists { name: String, namespace: String },
    #[error("provenance verification failed: {0}")]
    VerificationFailed(#[from] ProvenanceError),
    #[error("apply of {kind}/{name} failed: {cause}")]
    ApplyFailed {
        kind: String,
        name: String,
        cause: String,
    },
    #[error("no release `{name}` in namespace `{namespace}`")]
    NoSuchRelease { name: String, namespace: String },
    #[error("no revision {0} in release history")]
    NoSuchRevision(u32),
    #[error("gateway error: {0}")]
    Gateway(#[from] GatewayError),
}

// ---------------------------------------------------------------------------
// Values merging.

/// Recursive map merge: `over` wins; maps merge key-wise, scalars and lists
/// replace.
fn merge_trees(base: &Value, over: &Value) -> Value {
    match (base, over) {
        (Value::Mapping(a), Value::Mapping(b)) => {
            let mut merged = a.clone();
            for (k, v) in b {
                let entry = match merged.get(k) {
                    Some(existing) => merge_trees(existing, v),
                    None => v.clone(),
                };
                merged.insert(k.clone(), entry);
            }
            Value::Mapping(merged)
        }
        (_, over) => over.clone(),
    }
}

/// `--set` literal typing: true/false are bools, pure digit strings are
/// ints, quoting forces string, everything else is a string.
fn typed_scalar(raw: &str) -> Value {
    if raw.len() >= 2 && raw.starts_with('"') && raw.ends_with('"') {
        return Value::String(raw[1..raw.len() - 1].to_string());
    }
    match raw {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    let digits = raw.strip_prefix('-').unwrap_or(raw);
    if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
        if let Ok(n) = raw.parse::<i64>() {
            return Value::Number(n.into());
        }
    }
    Value::String(raw.to_string())
}

fn set_pair_tree(pair: &str) -> Result<Value, ReleaseError> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| ReleaseError::MalformedSetPair(pair.to_string()))?;
    if path.is_empty() || path.split('.').any(|seg| seg.is_empty()) {
        return Err(ReleaseError::MalformedSetPair(pair.to_string()));
    }
    let mut value = typed_scalar(raw);
    for seg in path.split('.').rev() {
        let mut map = serde_yaml::Mapping::new();
        map.insert(Value::String(seg.to_string()), value);
        value = Value::Mapping(map);
    }
    Ok(value)
}

/// Merge precedence lowest to highest: chart defaults, user values files in
/// order, then `--set` pairs. A comma separates multiple pairs in one flag.
pub fn merge_values(
    defaults: &Value,
    files: &[Value],
    set_pairs: &[String],
) -> Result<Values, ReleaseError> {
    let mut merged = if defaults.is_null() {
        Value::Mapping(serde_yaml::Mapping::new())
    } else {
        defaults.clone()
    };
    for file in files {
        merged = merge_trees(&merged, file);
    }
    for flag in set_pairs {
        for pair in flag.split(',') {
            merged = merge_trees(&merged, &set_pair_tree(pair)?);
        }
    }
    Ok(merged)
}

pub fn parse_values_file(text: &str) -> Result<Value, ReleaseError> {
    serde_yaml::from_str(text).map_err(|e| ReleaseError::MalformedValuesFile(e.to_string()))
}

// ---------------------------------------------------------------------------
// Revisions and releases.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RevisionStatus {
    Deployed,
    Superseded,
    Failed,
    Uninstalled,
}

impl std::fmt::Display for RevisionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RevisionStatus::Deployed => "deployed",
            RevisionStatus::Superseded => "superseded",
            RevisionStatus::Failed => "failed",
            RevisionStatus::Uninstalled => "uninstalled",
        };
        f.write_str(s)
    }
}

/// One immutable per-operation snapshot of a release.
#[derive(Debug, Clone, PartialEq)]
pub struct Revision {
    pub number: u32,
    pub chart_name: String,
    pub chart_version: String,
    pub values: Values,
    /// Post-render, pre-apply documents.
    pub manifests: Vec<ManifestDocument>,
    pub status: RevisionStatus,
    pub timestamp: DateTime<Utc>,
    pub note: Option<String>,
}

/// A named installed instance of a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Release {
    pub name: String,
    pub namespace: String,
    pub revisions: Vec<Revision>,
}

impl Release {
    pub fn deployed(&self) -> Option<&Revision> {
        self.revisions
            .iter()
            .find(|r| r.status == RevisionStatus::Deployed)
    }

    pub fn is_uninstalled(&self) -> bool {
        self.deployed().is_none()
            && self
                .revisions
                .iter()
                .any(|r| r.status == RevisionStatus::Uninstalled)
    }

    fn next_number(&self) -> u32 {
        self.revisions.iter().map(|r| r.number).max().unwrap_or(0) + 1
    }
}

/// On-wire form of a revision inside its release-record Secret.
#[derive(Debug, Serialize, Deserialize)]
struct RevisionRecord {
    release: String,
    namespace: String,
    number: u32,
    chart_name: String,
    chart_version: String,
    values: String,
    manifests: String,
    status: RevisionStatus,
    timestamp: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

impl RevisionRecord {
    fn from_revision(release: &str, namespace: &str, rev: &Revision) -> RevisionRecord {
        RevisionRecord {
            release: release.to_string(),
            namespace: namespace.to_string(),
            number: rev.number,
            chart_name: rev.chart_name.clone(),
            chart_version: rev.chart_version.clone(),
            values: serde_yaml::to_string(&rev.values).unwrap_or_default(),
            manifests: manifest::serialize_manifest_stream(&rev.manifests),
            status: rev.status,
            timestamp: rev.timestamp,
            note: rev.note.clone(),
        }
    }

    fn into_revision(self) -> Result<Revision, ReleaseError> {
        let values: Value = serde_yaml::from_str(&self.values)
            .map_err(|e| ReleaseError::MalformedValuesFile(e.to_string()))?;
        let manifests = manifest::parse_manifest_stream(&self.manifests)
            .map_err(|e| ReleaseError::RenderFailed(format!("stored manifests: {e}")))?;
        Ok(Revision {
            number: self.number,
            chart_name: self.chart_name,
            chart_version: self.chart_version,
            values,
            manifests,
            status: self.status,
            timestamp: self.timestamp,
            note: self.note,
        })
    }
}

fn record_name(release: &str, number: u32) -> String {
    format!("{RECORD_PREFIX}{release}.v{number}")
}

/// Release records are Secret-kind resources so state lives with the
/// cluster and round-trips through the gateway.
fn record_document(release: &str, namespace: &str, rev: &Revision) -> ManifestDocument {
    let record = RevisionRecord::from_revision(release, namespace, rev);
    let payload = serde_json::to_string(&record).expect("record serializes");
    let mut body = serde_yaml::Mapping::new();
    body.insert(Value::from("apiVersion"), Value::from("v1"));
    body.insert(Value::from("kind"), Value::from("Secret"));
    let mut metadata = serde_yaml::Mapping::new();
    metadata.insert(Value::from("name"), Value::from(record_name(release, rev.number)));
    metadata.insert(Value::from("namespace"), Value::from(namespace));
    let mut labels = serde_yaml::Mapping::new();
    labels.insert(Value::from(RECORD_LABEL), Value::from(release));
    metadata.insert(Value::from("labels"), Value::Mapping(labels));
    body.insert(Value::from("metadata"), Value::Mapping(metadata));
    body.insert(Value::from("type"), Value::from("charter.sh/release"));
    let mut data = serde_yaml::Mapping::new();
    data.insert(Value::from("release"), Value::from(payload));
    body.insert(Value::from("data"), Value::Mapping(data));
    ManifestDocument::from_value(Value::Mapping(body), 0).expect("record document is well formed")
}

pub fn is_release_record(doc: &ManifestDocument) -> bool {
    doc.kind == "Secret" && doc.name.starts_with(RECORD_PREFIX)
}

// ---------------------------------------------------------------------------
// Rendering.

fn run_post_renderer(path: &Path, input: &str) -> Result<String, ReleaseError> {
    let mut child = Command::new(path)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ReleaseError::PostRenderFailed {
            code: -1,
            stderr: format!("failed to start {}: {e}", path.display()),
        })?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let input_bytes = input.as_bytes().to_vec();
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(&input_bytes);
    });

    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match stdout.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if buf.len() > POST_RENDER_OUTPUT_CAP {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        buf
    });

    let deadline = Instant::now() + POST_RENDER_TIMEOUT;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(ReleaseError::PostRenderFailed {
                        code: -1,
                        stderr: "post-renderer timed out".into(),
                    });
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                return Err(ReleaseError::PostRenderFailed {
                    code: -1,
                    stderr: e.to_string(),
                })
            }
        }
    };
    let _ = writer.join();
    let output = reader.join().unwrap_or_default();

    if !status.success() {
        let mut stderr = String::new();
        if let Some(mut pipe) = child.stderr.take() {
            let _ = pipe.read_to_string(&mut stderr);
        }
        return Err(ReleaseError::PostRenderFailed {
            code: status.code().unwrap_or(-1),
            stderr: stderr.trim().to_string(),
        });
    }
    if output.len() > POST_RENDER_OUTPUT_CAP {
        return Err(ReleaseError::PostRenderFailed {
            code: -1,
            stderr: "post-renderer output exceeds 10 MB cap".into(),
        });
    }
    String::from_utf8(output)
        .map_err(|_| ReleaseError::PostRenderMalformed("output is not UTF-8".into()))
}

/// Render a chart to its final ordered document list: template render,
/// `---`-joined stream, optional post-render hook, parse back.
pub fn render_release(
    chart: &Chart,
    values: &Values,
    release_name: &str,
    namespace: &str,
    post_renderer: Option<&Path>,
) -> Result<Vec<ManifestDocument>, ReleaseError> {
    let report = chart::lint(chart);
    if report.has_errors() {
        return Err(ReleaseError::RenderFailed(format!("chart fails lint:\n{report}")));
    }
    let set = chart::build_template_set(chart)
        .map_err(|e| ReleaseError::RenderFailed(e.to_string()))?;
    let ctx = RenderContext {
        values: values.clone(),
        chart_name: chart.metadata.name.clone(),
        chart_version: chart.metadata.version.to_string(),
        release_name: release_name.to_string(),
        release_namespace: namespace.to_string(),
        strict: false,
    };
    let rendered = template::render_chart_templates(&set, &ctx)
        .map_err(|e| ReleaseError::RenderFailed(e.to_string()))?;
    let mut stream = String::new();
    for (i, text) in rendered.values().enumerate() {
        if i > 0 {
            stream.push_str("\n---\n");
        }
        stream.push_str(text);
    }

    let post_rendered = match post_renderer {
        Some(hook) => Some(run_post_renderer(hook, &stream)?),
        None => None,
    };
    let final_stream = post_rendered.as_deref().unwrap_or(&stream);
    let docs = manifest::parse_manifest_stream(final_stream).map_err(|e| {
        if post_renderer.is_some() {
            ReleaseError::PostRenderMalformed(e.to_string())
        } else {
            ReleaseError::RenderFailed(e.to_string())
        }
    })?;
    Ok(docs)
}

/// Namespace defaulting happens at apply time: namespaced documents without
/// an explicit namespace get the release's target namespace.
fn assign_namespace(doc: &ManifestDocument, namespace: &str) -> ManifestDocument {
    if doc.namespace.is_some() || manifest::is_cluster_scoped(&doc.kind) {
        return doc.clone();
    }
    let mut body = doc.body.clone();
    if let Value::Mapping(map) = &mut body {
        let metadata = map
            .entry(Value::from("metadata"))
            .or_insert_with(|| Value::Mapping(serde_yaml::Mapping::new()));
        if let Value::Mapping(meta) = metadata {
            meta.insert(Value::from("namespace"), Value::from(namespace));
        }
    }
    ManifestDocument::from_value(body, 0).expect("namespace assignment keeps document well formed")
}

// ---------------------------------------------------------------------------
// The manager.

pub struct VerifyRequest {
    pub archive: ChartArchive,
    pub record: Option<ProvenanceRecord>,
    pub trusted_keys: Vec<Vec<u8>>,
}

#[derive(Default)]
pub struct InstallOptions {
    pub post_renderer: Option<PathBuf>,
    pub verify: Option<VerifyRequest>,
}

/// Drives the release lifecycle against one cluster. One lifecycle
/// operation per (name, namespace) at a time; distinct releases may proceed
/// concurrently.
pub struct ReleaseManager {
    client: ClusterClient,
    locks: Mutex<HashMap<(String, String), Arc<Mutex<()>>>>,
}

impl ReleaseManager {
    pub fn new(client: ClusterClient) -> ReleaseManager {
        ReleaseManager {
            client,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn client(&self) -> &ClusterClient {
        &self.client
    }

    fn lock_for(&self, name: &str, namespace: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap();
        locks
            .entry((name.to_string(), namespace.to_string()))
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone()
    }

    fn save_revision(
        &self,
        name: &str,
        namespace: &str,
        rev: &Revision,
    ) -> Result<(), ReleaseError> {
        let doc = record_document(name, namespace, rev);
        self.client.apply(&doc)?;
        Ok(())
    }

    fn load_release(&self, name: &str, namespace: &str) -> Result<Option<Release>, ReleaseError> {
        let records = self
            .client
            .list(Some("Secret"), Some(namespace), Some(&format!("{RECORD_LABEL}={name}")))?;
        let mut revisions = Vec::new();
        for doc in records {
            if !doc.name.starts_with(&format!("{RECORD_PREFIX}{name}.v")) {
                continue;
            }
            let Some(payload) = doc
                .body
                .get("data")
                .and_then(|d| d.get("release"))
                .and_then(|v| v.as_str())
            else {
                continue;
            };
            let record: RevisionRecord = serde_json::from_str(payload)
                .map_err(|e| ReleaseError::RenderFailed(format!("corrupt release record: {e}")))?;
            revisions.push(record.into_revision()?);
        }
        if revisions.is_empty() {
            return Ok(None);
        }
        revisions.sort_by_key(|r| r.number);
        Ok(Some(Release {
            name: name.to_string(),
            namespace: namespace.to_string(),
            revisions,
        }))
    }

    /// Remove every record of a release (used when reinstalling over an
    /// uninstalled release).
    pub fn purge(&self, name: &str, namespace: &str) -> Result<(), ReleaseError> {
        if let Some(release) = self.load_release(name, namespace)? {
            for rev in &release.revisions {
                let key = ResourceKey {
                    kind: "Secret".into(),
                    namespace: namespace.to_string(),
                    name: record_name(name, rev.number),
                };
                self.client.delete(&key)?;
            }
        }
        Ok(())
    }

    fn check_dependencies(&self, chart: &Chart, namespace: &str) -> Result<(), ReleaseError> {
        let mut missing = Vec::new();
        for dep in &chart.metadata.dependencies {
            let bundled = chart.bundled_charts.iter().any(|c| {
                c.metadata.name == dep.name && dep.version_constraint.matches(&c.metadata.version)
            });
            if bundled {
                continue;
            }
            let installed = self
                .list_releases(Some(namespace))?
                .into_iter()
                .any(|(release, rev)| {
                    release.namespace == namespace
                        && rev.chart_name == dep.name
                        && semver::Version::parse(&rev.chart_version)
                            .map(|v| dep.version_constraint.matches(&v))
                            .unwrap_or(false)
                });
            if !installed {
                missing.push(format!("{} ({})", dep.name, dep.version_constraint));
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ReleaseError::DependencyUnsatisfied(missing))
        }
    }

    fn apply_in_order(
        &self,
        docs: &[ManifestDocument],
    ) -> Result<(), ReleaseError> {
        for doc in docs {
            self.client
                .apply(doc)
                .map_err(|e| ReleaseError::ApplyFailed {
                    kind: doc.kind.clone(),
                    name: doc.name.clone(),
                    cause: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn install(
        &self,
        chart: &Chart,
        values: &Values,
        release_name: &str,
        namespace: &str,
        opts: &InstallOptions,
    ) -> Result<Release, ReleaseError> {
        let lock = self.lock_for(release_name, namespace);
        let _guard = lock.lock().unwrap();

        if let Some(request) = &opts.verify {
            let record = request
                .record
                .as_ref()
                .ok_or(ProvenanceError::MissingProvenance)?;
            provenance::verify(&request.archive, record, &request.trusted_keys)?;
        }

        if let Some(existing) = self.load_release(release_name, namespace)? {
            if !existing.is_uninstalled() {
                return Err(ReleaseError::ReleaseExists {
                    name: release_name.to_string(),
                    namespace: namespace.to_string(),
                });
            }
            self.purge(release_name, namespace)?;
        }

        self.check_dependencies(chart, namespace)?;
        let docs = render_release(
            chart,
            values,
            release_name,
            namespace,
            opts.post_renderer.as_deref(),
        )?;
        let docs: Vec<ManifestDocument> = docs
            .iter()
            .map(|d| assign_namespace(d, namespace))
            .collect();
        let ordered = manifest::sort_for_install(&docs);

        let mut revision = Revision {
            number: 1,
            chart_name: chart.metadata.name.clone(),
            chart_version: chart.metadata.version.to_string(),
            values: values.clone(),
            manifests: ordered.clone(),
            status: RevisionStatus::Deployed,
            timestamp: Utc::now(),
            note: None,
        };

        if let Err(e) = self.apply_in_order(&ordered) {
            revision.status = RevisionStatus::Failed;
            revision.note = Some(e.to_string());
            self.save_revision(release_name, namespace, &revision)?;
            return Err(e);
        }
        self.save_revision(release_name, namespace, &revision)?;
        Ok(Release {
            name: release_name.to_string(),
            namespace: namespace.to_string(),
            revisions: vec![revision],
        })
    }

    /// Two-way diff against the deployed revision keyed by (kind, namespace,
    /// name): creates and updates in install order, deletes in uninstall
    /// order.
    fn apply_diff(
        &self,
        previous: &[ManifestDocument],
        next: &[ManifestDocument],
    ) -> Result<(), ReleaseError> {
        let next_keys: std::collections::BTreeSet<ResourceKey> =
            next.iter().map(ResourceKey::of).collect();
        let ordered_next = manifest::sort_for_install(next);
        self.apply_in_order(&ordered_next)?;

        let vanished: Vec<ManifestDocument> = previous
            .iter()
            .filter(|d| !next_keys.contains(&ResourceKey::of(d)))
            .cloned()
            .collect();
        for doc in manifest::sort_for_uninstall(&vanished) {
            self.client
                .delete(&ResourceKey::of(&doc))
                .map_err(|e| ReleaseError::ApplyFailed {
                    kind: doc.kind.clone(),
                    name: doc.name.clone(),
                    cause: e.to_string(),
                })?;
        }
        Ok(())
    }

    fn push_revision(
        &self,
        release: &mut Release,
        mut revision: Revision,
        previous_manifests: &[ManifestDocument],
    ) -> Result<(), ReleaseError> {
        match self.apply_diff(previous_manifests, &revision.manifests) {
            Ok(()) => {
                for rev in &mut release.revisions {
                    if rev.status == RevisionStatus::Deployed {
                        rev.status = RevisionStatus::Superseded;
                        self.save_revision(&release.name, &release.namespace, rev)?;
                    }
                }
                revision.status = RevisionStatus::Deployed;
                self.save_revision(&release.name, &release.namespace, &revision)?;
                release.revisions.push(revision);
                Ok(())
            }
            Err(e) => {
                revision.status = RevisionStatus::Failed;
                revision.note = Some(e.to_string());
                self.save_revision(&release.name, &release.namespace, &revision)?;
                release.revisions.push(revision);
                Err(e)
            }
        }
    }

    pub fn upgrade(
        &self,
        release_name: &str,
        namespace: &str,
        chart: &Chart,
        values: &Values,
        opts: &InstallOptions,
    ) -> Result<Release, ReleaseError> {
        let lock = self.lock_for(release_name, namespace);
        let _guard = lock.lock().unwrap();

        let mut release = self
            .load_release(release_name, namespace)?
            .filter(|r| r.deployed().is_some())
            .ok_or_else(|| ReleaseError::NoSuchRelease {
                name: release_name.to_string(),
                namespace: namespace.to_string(),
            })?;

        self.check_dependencies(chart, namespace)?;
        let docs = render_release(
            chart,
            values,
            release_name,
            namespace,
            opts.post_renderer.as_deref(),
        )?;
        let docs: Vec<ManifestDocument> = docs
            .iter()
            .map(|d| assign_namespace(d, namespace))
            .collect();
        let ordered = manifest::sort_for_install(&docs);
        let previous = release.deployed().expect("checked above").manifests.clone();

        let revision = Revision {
            number: release.next_number(),
            chart_name: chart.metadata.name.clone(),
            chart_version: chart.metadata.version.to_string(),
            values: values.clone(),
            manifests: ordered,
            status: RevisionStatus::Deployed,
            timestamp: Utc::now(),
            note: None,
        };
        self.push_revision(&mut release, revision, &previous)?;
        Ok(release)
    }

    pub fn rollback(
        &self,
        release_name: &str,
        namespace: &str,
        target_revision: u32,
    ) -> Result<Release, ReleaseError> {
        let lock = self.lock_for(release_name, namespace);
        let _guard = lock.lock().unwrap();

        let mut release = self
            .load_release(release_name, namespace)?
            .ok_or_else(|| ReleaseError::NoSuchRelease {
                name: release_name.to_string(),
                namespace: namespace.to_string(),
            })?;
        let target = release
            .revisions
            .iter()
            .find(|r| r.number == target_revision)
            .ok_or(ReleaseError::NoSuchRevision(target_revision))?
            .clone();
        let previous = release
            .deployed()
            .map(|r| r.manifests.clone())
            .unwrap_or_default();

        let revision = Revision {
            number: release.next_number(),
            chart_name: target.chart_name.clone(),
            chart_version: target.chart_version.clone(),
            values: target.values.clone(),
            manifests: target.manifests.clone(),
            status: RevisionStatus::Deployed,
            timestamp: Utc::now(),
            note: Some(format!("rollback to {target_revision}")),
        };
        self.push_revision(&mut release, revision, &previous)?;
        Ok(release)
    }

    pub fn uninstall(&self, release_name: &str, namespace: &str) -> Result<Release, ReleaseError> {
        let lock = self.lock_for(release_name, namespace);
        let _guard = lock.lock().unwrap();

        let mut release = self
            .load_release(release_name, namespace)?
            .filter(|r| !r.is_uninstalled())
            .ok_or_else(|| ReleaseError::NoSuchRelease {
                name: release_name.to_string(),
                namespace: namespace.to_string(),
            })?;
        let deployed = release
            .deployed()
            .cloned()
            .ok_or_else(|| ReleaseError::NoSuchRelease {
                name: release_name.to_string(),
                namespace: namespace.to_string(),
            })?;

        let ordered = manifest::sort_for_uninstall(&deployed.manifests);
        let mut remaining: Vec<String> = ordered
            .iter()
            .map(|d| format!("{}/{}", d.kind, d.name))
            .collect();
        for doc in &ordered {
            self.client
                .delete(&ResourceKey::of(doc))
                .map_err(|e| ReleaseError::ApplyFailed {
                    kind: doc.kind.clone(),
                    name: doc.name.clone(),
                    cause: format!("{e}; remaining: {remaining:?}"),
                })?;
            remaining.remove(0);
        }

        for rev in &mut release.revisions {
            if rev.status == RevisionStatus::Deployed {
                rev.status = RevisionStatus::Uninstalled;
                rev.note = Some("uninstalled".into());
                self.save_revision(release_name, namespace, rev)?;
            }
        }
        Ok(release)
    }

    pub fn history(&self, release_name: &str, namespace: &str) -> Result<Vec<Revision>, ReleaseError> {
        let release = self
            .load_release(release_name, namespace)?
            .ok_or_else(|| ReleaseError::NoSuchRelease {
                name: release_name.to_string(),
                namespace: namespace.to_string(),
            })?;
        Ok(release.revisions)
    }

    /// Non-uninstalled releases with their current revision, sorted by
    /// (namespace, name). All namespaces when `namespace` is None.
    pub fn list_releases(
        &self,
        namespace: Option<&str>,
    ) -> Result<Vec<(Release, Revision)>, ReleaseError> {
        let records = self.client.list(Some("Secret"), namespace, None)?;
        let mut by_release: BTreeMap<(String, String), Vec<Revision>> = BTreeMap::new();
        for doc in records {
            if !is_release_record(&doc) {
                continue;
            }
            let Some(payload) = doc
                .body
                .get("data")
                .and_then(|d| d.get("release"))
                .and_then(|v| v.as_str())
            else {
                continue;
            };
            let Ok(record) = serde_json::from_str::<RevisionRecord>(payload) else {
                continue;
            };
            let key = (record.namespace.clone(), record.release.clone());
            by_release.entry(key).or_default().push(record.into_revision()?);
        }
        let mut out = Vec::new();
        for ((namespace, name), mut revisions) in by_release {
            revisions.sort_by_key(|r| r.number);
            let release = Release {
                name,
                namespace,
                revisions,
            };
            if release.is_uninstalled() {
                continue;
            }
            let Some(current) = release
                .revisions
                .iter()
                .rev()
                .find(|r| r.status == RevisionStatus::Deployed)
                .or(release.revisions.last())
            else {
                continue;
            };
            let current = current.clone();
            out.push((release, current));
        }
        Ok(out)
    }
}
