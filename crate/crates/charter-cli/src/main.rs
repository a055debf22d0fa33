//! The `charter` command line: a thin layer over charter-core.

use anyhow::{anyhow, bail, Context, Result};
use charter_core::chart::{self, Chart};
use charter_core::gateway::{ClusterClient, MockServer};
use charter_core::provenance::{self, KeyPair, ProvenanceRecord};
use charter_core::release::{self, InstallOptions, ReleaseManager, Revision, VerifyRequest};
use charter_core::repo::{self, RepoRef, RepositoryIndex};
use charter_core::ChartArchive;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "charter", version, about = "A desk-scale package manager for declarative application manifests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ClusterArgs {
    /// Control plane base URL
    #[arg(long, env = "CHARTER_CLUSTER_URL", default_value = "http://127.0.0.1:8420")]
    cluster_url: String,
    /// Target namespace
    #[arg(long, short = 'n', env = "CHARTER_NAMESPACE", default_value = "default")]
    namespace: String,
}

#[derive(Args, Clone)]
struct ReleaseFlags {
    /// Values file, lowest precedence first (repeatable)
    #[arg(long, short = 'f')]
    values: Vec<PathBuf>,
    /// Override values: k.path=value[,k.path=value] (repeatable)
    #[arg(long)]
    set: Vec<String>,
    /// Executable that rewrites the rendered manifest stream
    #[arg(long)]
    post_render: Option<PathBuf>,
    /// Verify provenance before install
    #[arg(long)]
    verify: bool,
    /// Trusted public key file (repeatable)
    #[arg(long)]
    trusted_key: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Scaffold a new chart directory
    Create { name: String },
    /// Pack a chart directory into a .tgz archive
    Package {
        dir: PathBuf,
        /// Sign the archive into a sidecar .prov file
        #[arg(long)]
        sign: bool,
        /// Private key file for --sign
        #[arg(long, env = "CHARTER_KEY")]
        key: Option<PathBuf>,
    },
    /// Validate a chart directory
    Lint { dir: PathBuf },
    /// Repository management
    Repo {
        #[command(subcommand)]
        command: RepoCommand,
    },
    /// Search configured repositories
    Search {
        #[arg(default_value = "")]
        query: String,
        #[arg(long, value_parser = ["table", "json"], default_value = "table")]
        output: String,
    },
    /// Install a chart as a new release
    Install {
        release: String,
        chart_ref: String,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[command(flatten)]
        flags: ReleaseFlags,
    },
    /// Upgrade an existing release
    Upgrade {
        release: String,
        chart_ref: String,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[command(flatten)]
        flags: ReleaseFlags,
    },
    /// Roll a release back to an earlier revision
    Rollback {
        release: String,
        revision: u32,
        #[command(flatten)]
        cluster: ClusterArgs,
    },
    /// Remove a release's resources
    Uninstall {
        release: String,
        #[command(flatten)]
        cluster: ClusterArgs,
    },
    /// Show a release's revision history
    History {
        release: String,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long, value_parser = ["table", "json"], default_value = "table")]
        output: String,
    },
    /// List releases
    List {
        /// Restrict to one namespace; all namespaces otherwise
        #[arg(long, short = 'n')]
        namespace: Option<String>,
        #[arg(long, env = "CHARTER_CLUSTER_URL", default_value = "http://127.0.0.1:8420")]
        cluster_url: String,
        #[arg(long, value_parser = ["table", "json"], default_value = "table")]
        output: String,
    },
    /// Verify an archive against its .prov sidecar
    Verify {
        tgz: PathBuf,
        #[arg(long)]
        trusted_key: Vec<PathBuf>,
    },
    /// Generate a signing key pair: <path> (private) and <path>.pub
    Keygen { path: PathBuf },
    /// Run the bundled in-memory control plane
    MockServer {
        #[arg(long, default_value = "127.0.0.1:8420")]
        listen: String,
        /// Write a JSON snapshot of the store on shutdown
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RepoCommand {
    /// Generate (or refresh) index.yaml for a directory of archives
    Index { dir: PathBuf },
    /// Register a repository alias
    Add { alias: String, url: String },
    /// List configured repositories
    List {
        #[arg(long, value_parser = ["table", "json"], default_value = "table")]
        output: String,
    },
}

// ---------------------------------------------------------------------------
// Config and cache locations.

fn config_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("CHARTER_CONFIG_DIR") {
        return PathBuf::from(dir);
    }
    let home = std::env::var("HOME").unwrap_or_else(|_| ".".into());
    Path::new(&home).join(".config").join("charter")
}

fn cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("CHARTER_CACHE_DIR") {
        return PathBuf::from(dir);
    }
    config_dir().join("cache")
}

fn load_repos() -> Result<Vec<RepoRef>> {
    let path = config_dir().join("repositories.yaml");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path)?;
    serde_yaml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn save_repos(repos: &[RepoRef]) -> Result<()> {
    let dir = config_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("repositories.yaml"), serde_yaml::to_string(repos)?)?;
    Ok(())
}

fn cached_index(repo: &RepoRef) -> Result<RepositoryIndex> {
    let cached = cache_dir().join(format!("{}-index.yaml", repo.alias));
    if cached.exists() {
        let text = fs::read_to_string(&cached)?;
        return Ok(RepositoryIndex::from_yaml(&text)?);
    }
    Ok(repo::fetch_index(repo, Some(&cache_dir()))?)
}

// ---------------------------------------------------------------------------
// Chart reference resolution: local directory, then local .tgz, then
// alias/name repository reference.

struct ResolvedChart {
    chart: Chart,
    archive: Option<ChartArchive>,
    prov: Option<ProvenanceRecord>,
}

fn resolve_chart_ref(chart_ref: &str) -> Result<ResolvedChart> {
    let path = Path::new(chart_ref);
    if path.is_dir() {
        return Ok(ResolvedChart {
            chart: chart::load(path)?,
            archive: None,
            prov: None,
        });
    }
    if path.is_file() {
        let bytes = fs::read(path)?;
        let filename = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let archive = ChartArchive::from_bytes(bytes, filename);
        let chart = chart::unpack(&archive)?;
        let prov = ProvenanceRecord::read_sidecar(path).ok();
        return Ok(ResolvedChart {
            chart,
            archive: Some(archive),
            prov,
        });
    }
    if let Some((alias, name)) = chart_ref.split_once('/') {
        let repos = load_repos()?;
        let repo = repos
            .iter()
            .find(|r| r.alias == alias)
            .ok_or_else(|| anyhow!("no repository with alias `{alias}`"))?;
        let index = cached_index(repo)?;
        let archive = repo::fetch_chart(repo, &index, name, None)?;
        let chart = chart::unpack(&archive)?;
        let prov = repo::fetch_bytes(repo, &format!("{}.prov", archive.filename))
            .ok()
            .and_then(|bytes| {
                String::from_utf8(bytes)
                    .ok()
                    .and_then(|text| ProvenanceRecord::from_text(&text).ok())
            });
        return Ok(ResolvedChart {
            chart,
            archive: Some(archive),
            prov,
        });
    }
    bail!("chart reference `{chart_ref}` is not a directory, a .tgz file, or an alias/name repo reference")
}

fn read_trusted_keys(paths: &[PathBuf]) -> Result<Vec<Vec<u8>>> {
    paths
        .iter()
        .map(|p| {
            Ok(KeyPair::load_public(p)
                .with_context(|| format!("reading trusted key {}", p.display()))?
                .public_key)
        })
        .collect()
}

fn install_options(flags: &ReleaseFlags, resolved: &ResolvedChart) -> Result<InstallOptions> {
    let verify = if flags.verify {
        let archive = resolved
            .archive
            .clone()
            .ok_or_else(|| anyhow!("--verify needs a packed archive (a .tgz or repo reference)"))?;
        Some(VerifyRequest {
            archive,
            record: resolved.prov.clone(),
            trusted_keys: read_trusted_keys(&flags.trusted_key)?,
        })
    } else {
        None
    };
    Ok(InstallOptions {
        post_renderer: flags.post_render.clone(),
        verify,
    })
}

fn merged_values(chart: &Chart, flags: &ReleaseFlags) -> Result<release::Values> {
    let mut files = Vec::new();
    for path in &flags.values {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading values file {}", path.display()))?;
        files.push(release::parse_values_file(&text)?);
    }
    Ok(release::merge_values(
        &chart.default_values,
        &files,
        &flags.set,
    )?)
}

// ---------------------------------------------------------------------------
// Output helpers.

fn revision_json(rev: &Revision) -> serde_json::Value {
    json!({
        "revision": rev.number,
        "status": rev.status.to_string(),
        "chart": rev.chart_name,
        "chartVersion": rev.chart_version,
        "timestamp": rev.timestamp.to_rfc3339(),
        "note": rev.note,
    })
}

fn print_history(revisions: &[Revision], output: &str) {
    if output == "json" {
        let rows: Vec<serde_json::Value> = revisions.iter().map(revision_json).collect();
        println!("{}", serde_json::to_string_pretty(&rows).unwrap());
        return;
    }
    println!("{:<10} {:<12} {:<20} {:<25} NOTE", "REVISION", "STATUS", "CHART", "UPDATED");
    for rev in revisions {
        println!(
            "{:<10} {:<12} {:<20} {:<25} {}",
            rev.number,
            rev.status,
            format!("{}-{}", rev.chart_name, rev.chart_version),
            rev.timestamp.to_rfc3339(),
            rev.note.as_deref().unwrap_or("")
        );
    }
}

// ---------------------------------------------------------------------------

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Create { name } => {
            let cwd = std::env::current_dir()?;
            chart::scaffold(&name, &cwd)?;
            println!("created {name}/");
        }
        Command::Package { dir, sign, key } => {
            let chart = chart::load(&dir)?;
            let archive = chart::pack(&chart)?;
            let out = std::env::current_dir()?.join(&archive.filename);
            fs::write(&out, &archive.bytes)?;
            println!("packaged {} (sha256:{})", archive.filename, archive.digest);
            if sign {
                let key_path = key.ok_or_else(|| anyhow!("--sign requires --key <path>"))?;
                let key = KeyPair::load_private(&key_path)?;
                let record = provenance::sign(&archive, &key)?;
                record.write_sidecar(&out)?;
                println!("signed as {} ({}.prov)", record.signer_id, archive.filename);
            }
        }
        Command::Lint { dir } => {
            let chart = chart::load(&dir)?;
            let report = chart::lint(&chart);
            print!("{report}");
            if report.has_errors() {
                bail!("lint found errors");
            }
            println!("no errors");
        }
        Command::Repo { command } => match command {
            RepoCommand::Index { dir } => {
                let outcome = repo::generate_index(&dir)?;
                println!(
                    "indexed {} chart(s) into {}",
                    outcome.index.entries.values().map(|v| v.len()).sum::<usize>(),
                    dir.join("index.yaml").display()
                );
                if !outcome.failures.is_empty() {
                    for (file, reason) in &outcome.failures {
                        eprintln!("skipped {file}: {reason}");
                    }
                    bail!("{} archive(s) could not be indexed", outcome.failures.len());
                }
            }
            RepoCommand::Add { alias, url } => {
                let mut repos = load_repos()?;
                if repos.iter().any(|r| r.alias == alias) {
                    bail!("alias `{alias}` already configured");
                }
                let repo_ref = RepoRef {
                    alias: alias.clone(),
                    url,
                };
                repo::fetch_index(&repo_ref, Some(&cache_dir()))?;
                repos.push(repo_ref);
                save_repos(&repos)?;
                println!("added repository {alias}");
            }
            RepoCommand::List { output } => {
                let repos = load_repos()?;
                if output == "json" {
                    println!("{}", serde_json::to_string_pretty(&repos)?);
                } else {
                    println!("{:<16} URL", "ALIAS");
                    for r in &repos {
                        println!("{:<16} {}", r.alias, r.url);
                    }
                }
            }
        },
        Command::Search { query, output } => {
            let repos = load_repos()?;
            let mut indexes = Vec::new();
            for repo_ref in &repos {
                indexes.push((repo_ref.alias.clone(), cached_index(repo_ref)?));
            }
            let rows = repo::search(&indexes, &query);
            if output == "json" {
                let items: Vec<serde_json::Value> = rows
                    .iter()
                    .map(|(alias, e)| {
                        json!({
                            "repo": alias,
                            "name": e.name,
                            "version": e.version,
                            "description": e.description,
                        })
                    })
                    .collect();
                println!("{}", serde_json::to_string_pretty(&items)?);
            } else {
                println!("{:<12} {:<20} {:<10} DESCRIPTION", "REPO", "NAME", "VERSION");
                for (alias, entry) in rows {
                    println!(
                        "{:<12} {:<20} {:<10} {}",
                        alias,
                        entry.name,
                        entry.version,
                        entry.description.as_deref().unwrap_or("")
                    );
                }
            }
        }
        Command::Install {
            release,
            chart_ref,
            cluster,
            flags,
        } => {
            let resolved = resolve_chart_ref(&chart_ref)?;
            let values = merged_values(&resolved.chart, &flags)?;
            let opts = install_options(&flags, &resolved)?;
            let manager = ReleaseManager::new(ClusterClient::new(&cluster.cluster_url));
            let installed =
                manager.install(&resolved.chart, &values, &release, &cluster.namespace, &opts)?;
            println!(
                "installed release {} (revision {}) in namespace {}",
                installed.name,
                installed.revisions.last().map(|r| r.number).unwrap_or(1),
                installed.namespace
            );
        }
        Command::Upgrade {
            release,
            chart_ref,
            cluster,
            flags,
        } => {
            let resolved = resolve_chart_ref(&chart_ref)?;
            let values = merged_values(&resolved.chart, &flags)?;
            let opts = install_options(&flags, &resolved)?;
            let manager = ReleaseManager::new(ClusterClient::new(&cluster.cluster_url));
            let upgraded =
                manager.upgrade(&release, &cluster.namespace, &resolved.chart, &values, &opts)?;
            println!(
                "upgraded release {} to revision {}",
                upgraded.name,
                upgraded.revisions.last().map(|r| r.number).unwrap_or(0)
            );
        }
        Command::Rollback {
            release,
            revision,
            cluster,
        } => {
            let manager = ReleaseManager::new(ClusterClient::new(&cluster.cluster_url));
            let rolled = manager.rollback(&release, &cluster.namespace, revision)?;
            println!(
                "rolled back release {} to revision {} (as revision {})",
                rolled.name,
                revision,
                rolled.revisions.last().map(|r| r.number).unwrap_or(0)
            );
        }
        Command::Uninstall { release, cluster } => {
            let manager = ReleaseManager::new(ClusterClient::new(&cluster.cluster_url));
            manager.uninstall(&release, &cluster.namespace)?;
            println!("uninstalled release {release}");
        }
        Command::History {
            release,
            cluster,
            output,
        } => {
            let manager = ReleaseManager::new(ClusterClient::new(&cluster.cluster_url));
            let revisions = manager.history(&release, &cluster.namespace)?;
            print_history(&revisions, &output);
        }
        Command::List {
            namespace,
            cluster_url,
            output,
        } => {
            let manager = ReleaseManager::new(ClusterClient::new(&cluster_url));
            let rows = manager.list_releases(namespace.as_deref())?;
            if output == "json" {
                let items: Vec<serde_json::Value> = rows
                    .iter()
                    .map(|(release, rev)| {
                        json!({
                            "name": release.name,
                            "namespace": release.namespace,
                            "current": revision_json(rev),
                        })
                    })
                    .collect();
                println!("{}", serde_json::to_string_pretty(&items)?);
            } else {
                println!("{:<16} {:<16} {:<10} {:<12} CHART", "NAME", "NAMESPACE", "REVISION", "STATUS");
                for (release, rev) in rows {
                    println!(
                        "{:<16} {:<16} {:<10} {:<12} {}-{}",
                        release.name, release.namespace, rev.number, rev.status, rev.chart_name, rev.chart_version
                    );
                }
            }
        }
        Command::Verify { tgz, trusted_key } => {
            let bytes = fs::read(&tgz)?;
            let filename = tgz
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default();
            let archive = ChartArchive::from_bytes(bytes, filename);
            let record = ProvenanceRecord::read_sidecar(&tgz)?;
            let keys = read_trusted_keys(&trusted_key)?;
            let result = provenance::verify(&archive, &record, &keys)?;
            println!("verified: signed by {}", result.signer_id);
        }
        Command::Keygen { path } => {
            let key = KeyPair::generate();
            key.save(&path)?;
            println!(
                "wrote {} and {}.pub (fingerprint {})",
                path.display(),
                path.display(),
                key.fingerprint
            );
        }
        Command::MockServer { listen, snapshot } => {
            let server = match snapshot {
                Some(path) => MockServer::start_with_snapshot(&listen, path)?,
                None => MockServer::start(&listen)?,
            };
            println!("mock control plane listening on {}", server.base_url());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
