//! Core library for charter, a desk-scale package manager for declarative
//! application manifests.
//!
//! Charts bundle templated manifest files with metadata and default values.
//! Repositories distribute packed charts over HTTP with an index file.
//! Releases track installed instances of charts against a control plane
//! reached over JSON/REST, with ordered apply, upgrade, rollback and
//! provenance verification.

pub mod chart;
pub mod gateway;
pub mod manifest;
pub mod provenance;
pub mod release;
pub mod repo;
pub mod template;

pub use chart::{Chart, ChartArchive, ChartMetadata, DependencyRef, LintReport};
pub use gateway::{ClusterClient, ClusterEvent, MockServer, ResourceKey};
pub use manifest::{KindOrder, ManifestDocument};
pub use provenance::{KeyPair, ProvenanceRecord, VerificationResult};
pub use release::{Release, ReleaseManager, Revision, RevisionStatus, Values};
pub use repo::{IndexEntry, RepoRef, RepositoryIndex};
