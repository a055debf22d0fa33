//! Chart repositories: a directory of `.tgz` archives plus an `index.yaml`
//! catalog, served over plain HTTP or read from a local path.

use crate::chart::{self, ChartArchive, VersionConstraint};
use chrono::{DateTime, Utc};
use semver::Version;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("repository unreachable: {0}")]
    Unreachable(String),
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("malformed index: {0}")]
    MalformedIndex(String),
    #[error("chart not found: {0}")]
    NotFound(String),
    #[error("no version of `{name}` matches `{constraint}`")]
    NoMatchingVersion { name: String, constraint: String },
    #[error("downloaded archive digest does not match index entry")]
    DigestMismatch,
    #[error("not a chart archive: {0}")]
    NotAChart(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One archive in the repository catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// `sha256:` + hex of the archive bytes.
    pub digest: String,
    pub urls: Vec<String>,
    pub created: DateTime<Utc>,
}

impl IndexEntry {
    pub fn semver(&self) -> Result<Version, RepoError> {
        Version::parse(&self.version)
            .map_err(|e| RepoError::MalformedIndex(format!("bad version `{}`: {e}", self.version)))
    }
}

/// The repository catalog: chart name to version-descending entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryIndex {
    #[serde(rename = "apiVersion")]
    pub api_version: String,
    pub generated: DateTime<Utc>,
    #[serde(default)]
    pub entries: BTreeMap<String, Vec<IndexEntry>>,
}

impl RepositoryIndex {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("index serializes")
    }

    pub fn from_yaml(text: &str) -> Result<RepositoryIndex, RepoError> {
        let index: RepositoryIndex =
            serde_yaml::from_str(text).map_err(|e| RepoError::MalformedIndex(e.to_string()))?;
        if index.api_version != "v1" {
            return Err(RepoError::MalformedIndex(format!(
                "unsupported apiVersion `{}`",
                index.api_version
            )));
        }
        for (name, entries) in &index.entries {
            for entry in entries {
                if &entry.name != name {
                    return Err(RepoError::MalformedIndex(format!(
                        "entry name `{}` under key `{name}`",
                        entry.name
                    )));
                }
            }
        }
        Ok(index)
    }

    /// Equality on everything except the `generated` timestamp.
    pub fn same_content(&self, other: &RepositoryIndex) -> bool {
        self.api_version == other.api_version && self.entries == other.entries
    }
}

/// A configured repository: unique alias plus base URL (http) or local path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoRef {
    pub alias: String,
    pub url: String,
}

impl RepoRef {
    fn is_http(&self) -> bool {
        self.url.starts_with("http://") || self.url.starts_with("https://")
    }
}

pub struct IndexOutcome {
    pub index: RepositoryIndex,
    /// Archives that could not be read, with the reason. The rest of the
    /// directory is still indexed.
    pub failures: Vec<(String, String)>,
}

/// Scan `*.tgz` under `dir`, build the index and write `dir/index.yaml`.
/// Re-running on an unchanged directory yields an index equal in all fields
/// except `generated`.
pub fn generate_index(dir: &Path) -> Result<IndexOutcome, RepoError> {
    let mut entries: BTreeMap<String, Vec<IndexEntry>> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "tgz").unwrap_or(false))
        .collect();
    names.sort();

    for path in names {
        let filename = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                failures.push((filename, e.to_string()));
                continue;
            }
        };
        // file mtime, not generation time, so re-indexing an unchanged
        // directory leaves entries untouched
        let created = fs::metadata(&path)
            .and_then(|m| m.modified())
            .map(chrono::DateTime::<Utc>::from)
            .unwrap_or_else(|_| Utc::now());
        let archive = ChartArchive::from_bytes(bytes, filename.clone());
        let loaded = match chart::unpack(&archive) {
            Ok(c) => c,
            Err(e) => {
                failures.push((filename, e.to_string()));
                continue;
            }
        };
        entries
            .entry(loaded.metadata.name.clone())
            .or_default()
            .push(IndexEntry {
                name: loaded.metadata.name.clone(),
                version: loaded.metadata.version.to_string(),
                description: loaded.metadata.description.clone(),
                digest: format!("sha256:{}", archive.digest),
                urls: vec![filename],
                created,
            });
    }

    for list in entries.values_mut() {
        list.sort_by(|a, b| {
            let va = Version::parse(&a.version).unwrap_or_else(|_| Version::new(0, 0, 0));
            let vb = Version::parse(&b.version).unwrap_or_else(|_| Version::new(0, 0, 0));
            vb.cmp(&va)
        });
    }

    let index = RepositoryIndex {
        api_version: "v1".to_string(),
        generated: Utc::now(),
        entries,
    };
    write_atomically(&dir.join("index.yaml"), index.to_yaml().as_bytes())?;
    Ok(IndexOutcome { index, failures })
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), RepoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    fs::write(tmp.path(), bytes)?;
    tmp.persist(path).map_err(|e| RepoError::Io(e.error))?;
    Ok(())
}

fn http_get(url: &str) -> Result<Vec<u8>, RepoError> {
    let response = ureq::get(url).call().map_err(|e| match e {
        ureq::Error::Status(code, _) => RepoError::HttpStatus(code),
        ureq::Error::Transport(t) => RepoError::Unreachable(t.to_string()),
    })?;
    let mut bytes = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(RepoError::Io)?;
    Ok(bytes)
}

/// Fetch a file relative to the repo base (or an absolute http url).
pub fn fetch_bytes(repo: &RepoRef, rel_or_abs: &str) -> Result<Vec<u8>, RepoError> {
    if rel_or_abs.starts_with("http://") || rel_or_abs.starts_with("https://") {
        return http_get(rel_or_abs);
    }
    if repo.is_http() {
        let base = repo.url.trim_end_matches('/');
        http_get(&format!("{base}/{rel_or_abs}"))
    } else {
        Ok(fs::read(Path::new(&repo.url).join(rel_or_abs))?)
    }
}

/// Fetch `<base>/index.yaml`; on success the raw bytes are cached under
/// `cache_dir` keyed by the repo alias.
pub fn fetch_index(repo: &RepoRef, cache_dir: Option<&Path>) -> Result<RepositoryIndex, RepoError> {
    let bytes = fetch_bytes(repo, "index.yaml")?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| RepoError::MalformedIndex("index.yaml is not UTF-8".into()))?;
    let index = RepositoryIndex::from_yaml(&text)?;
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir)?;
        write_atomically(&dir.join(format!("{}-index.yaml", repo.alias)), &bytes)?;
    }
    Ok(index)
}

/// Resolve the highest version satisfying the constraint, download it and
/// check its digest against the index entry.
pub fn fetch_chart(
    repo: &RepoRef,
    index: &RepositoryIndex,
    name: &str,
    constraint: Option<&VersionConstraint>,
) -> Result<ChartArchive, RepoError> {
    let entries = index
        .entries
        .get(name)
        .ok_or_else(|| RepoError::NotFound(name.to_string()))?;

    let mut best: Option<(&IndexEntry, Version)> = None;
    for entry in entries {
        let v = entry.semver()?;
        if let Some(c) = constraint {
            if !c.matches(&v) {
                continue;
            }
        }
        if best.as_ref().map(|(_, bv)| v > *bv).unwrap_or(true) {
            best = Some((entry, v));
        }
    }
    let (entry, _) = best.ok_or_else(|| RepoError::NoMatchingVersion {
        name: name.to_string(),
        constraint: constraint.map(|c| c.to_string()).unwrap_or_else(|| "*".into()),
    })?;

    let url = entry
        .urls
        .first()
        .ok_or_else(|| RepoError::MalformedIndex(format!("entry for {name} has no urls")))?;
    let bytes = fetch_bytes(repo, url)?;
    let digest = format!("sha256:{}", hex::encode(Sha256::digest(&bytes)));
    if digest != entry.digest {
        return Err(RepoError::DigestMismatch);
    }
    let filename = url.rsplit('/').next().unwrap_or(url).to_string();
    Ok(ChartArchive::from_bytes(bytes, filename))
}

/// Case-insensitive substring search over name and description; newest
/// version per chart per repo, ordered by (name, alias).
pub fn search<'a>(
    indexes: &'a [(String, RepositoryIndex)],
    query: &str,
) -> Vec<(&'a str, &'a IndexEntry)> {
    let needle = query.to_lowercase();
    let mut rows = Vec::new();
    for (alias, index) in indexes {
        for entries in index.entries.values() {
            let Some(newest) = entries.first() else {
                continue;
            };
            let haystack = format!(
                "{} {}",
                newest.name.to_lowercase(),
                newest.description.as_deref().unwrap_or("").to_lowercase()
            );
            if needle.is_empty() || haystack.contains(&needle) {
                rows.push((alias.as_str(), newest));
            }
        }
    }
    rows.sort_by(|(aa, ea), (ab, eb)| ea.name.cmp(&eb.name).then(aa.cmp(ab)));
    rows
}
