//! End-to-end release lifecycle against the bundled mock control plane.

use charter_core::chart::{Chart, ChartKind, ChartMetadata, DependencyRef, VersionConstraint};
use charter_core::gateway::{ClusterClient, EventVerb, MockServer, ResourceKey};
use charter_core::release::{
    self, InstallOptions, ReleaseError, ReleaseManager, RevisionStatus,
};
use charter_core::manifest;
use semver::Version;
use std::collections::BTreeMap;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::PathBuf;

fn harness() -> (MockServer, ReleaseManager) {
    let server = MockServer::start("127.0.0.1:0").unwrap();
    let manager = ReleaseManager::new(ClusterClient::new(&server.base_url()));
    (server, manager)
}

fn chart_with(name: &str, version: &str, templates: &[(&str, &str)]) -> Chart {
    Chart {
        metadata: ChartMetadata {
            name: name.to_string(),
            version: Version::parse(version).unwrap(),
            description: None,
            kind: ChartKind::Application,
            dependencies: vec![],
        },
        default_values: serde_yaml::from_str("{replicas: 1}").unwrap(),
        templates: templates
            .iter()
            .map(|(p, t)| (p.to_string(), t.to_string()))
            .collect(),
        bundled_charts: vec![],
        extra_files: BTreeMap::new(),
    }
}

fn three_kind_chart() -> Chart {
    chart_with(
        "demo",
        "1.0.0",
        &[
            (
                "deploy.yaml",
                "apiVersion: apps/v1\nkind: Deployment\nmetadata:\n  name: {{ .Release.Name }}-app\nspec:\n  replicas: {{ .Values.replicas }}\n",
            ),
            (
                "ns.yaml",
                "apiVersion: v1\nkind: Namespace\nmetadata:\n  name: {{ .Release.Name }}-ns\n",
            ),
            (
                "secret.yaml",
                "apiVersion: v1\nkind: Secret\nmetadata:\n  name: {{ .Release.Name }}-creds\n",
            ),
        ],
    )
}

fn non_record_keys(server: &MockServer) -> Vec<ResourceKey> {
    server
        .resource_keys()
        .into_iter()
        .filter(|k| !(k.kind == "Secret" && k.name.starts_with("charter.release.")))
        .collect()
}

fn write_hook(dir: &std::path::Path, name: &str, script: &str) -> PathBuf {
    let path = dir.join(name);
    let mut file = std::fs::File::create(&path).unwrap();
    file.write_all(script.as_bytes()).unwrap();
    drop(file);
    let mut perms = std::fs::metadata(&path).unwrap().permissions();
    perms.set_mode(0o755);
    std::fs::set_permissions(&path, perms).unwrap();
    path
}

#[test]
fn install_applies_in_kind_order_and_records_revision() {
    let (server, manager) = harness();
    let chart = three_kind_chart();
    let release = manager
        .install(&chart, &chart.default_values, "web", "ns", &InstallOptions::default())
        .unwrap();
    assert_eq!(release.revisions.len(), 1);
    assert_eq!(release.revisions[0].status, RevisionStatus::Deployed);

    // create-event order follows the kind order: Namespace, Secret, Deployment
    let client = ClusterClient::new(&server.base_url());
    let kinds: Vec<String> = client
        .events(0)
        .unwrap()
        .into_iter()
        .filter(|e| e.verb == EventVerb::Create && !e.key.name.starts_with("charter.release."))
        .map(|e| e.key.kind)
        .collect();
    assert_eq!(kinds, ["Namespace", "Secret", "Deployment"]);
    assert_eq!(non_record_keys(&server).len(), 3);
}

#[test]
fn install_same_name_twice_is_release_exists() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions::default();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .unwrap();
    assert!(matches!(
        manager.install(&chart, &chart.default_values, "web", "ns", &opts),
        Err(ReleaseError::ReleaseExists { .. })
    ));
}

#[test]
fn upgrade_diffs_create_update_delete() {
    let (server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions::default();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .unwrap();

    // v2 drops the Secret template
    let mut v2 = chart.clone();
    v2.metadata.version = Version::parse("2.0.0").unwrap();
    v2.templates.remove("secret.yaml");
    let release = manager
        .upgrade("web", "ns", &v2, &v2.default_values, &opts)
        .unwrap();

    assert_eq!(release.revisions.len(), 2);
    assert_eq!(release.revisions[0].status, RevisionStatus::Superseded);
    assert_eq!(release.revisions[1].status, RevisionStatus::Deployed);

    // set-difference oracle over the two manifest key sets
    let keys = |revision: usize| -> std::collections::BTreeSet<ResourceKey> {
        release.revisions[revision]
            .manifests
            .iter()
            .map(ResourceKey::of)
            .collect()
    };
    let vanished: Vec<ResourceKey> = keys(0).difference(&keys(1)).cloned().collect();
    assert_eq!(vanished.len(), 1);
    assert_eq!(vanished[0].kind, "Secret");
    let live = non_record_keys(&server);
    assert!(!live.iter().any(|k| k.kind == "Secret"));
    assert_eq!(live.len(), 2);
}

#[test]
fn upgrade_nonexistent_release_fails() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    assert!(matches!(
        manager.upgrade("ghost", "ns", &chart, &chart.default_values, &InstallOptions::default()),
        Err(ReleaseError::NoSuchRelease { .. })
    ));
}

#[test]
fn rollback_copies_target_manifests() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions::default();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .unwrap();
    let changed: serde_yaml::Value = serde_yaml::from_str("{replicas: 5}").unwrap();
    manager.upgrade("web", "ns", &chart, &changed, &opts).unwrap();
    let release = manager.rollback("web", "ns", 1).unwrap();

    assert_eq!(release.revisions.len(), 3);
    let statuses: Vec<RevisionStatus> = release.revisions.iter().map(|r| r.status).collect();
    assert_eq!(
        statuses,
        [
            RevisionStatus::Superseded,
            RevisionStatus::Superseded,
            RevisionStatus::Deployed
        ]
    );
    // canonical serialization of revision 3 equals revision 1 exactly
    assert_eq!(
        manifest::serialize_manifest_stream(&release.revisions[2].manifests),
        manifest::serialize_manifest_stream(&release.revisions[0].manifests)
    );
    assert_eq!(release.revisions[2].note.as_deref(), Some("rollback to 1"));
}

#[test]
fn rollback_to_unknown_revision_fails() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &InstallOptions::default())
        .unwrap();
    assert!(matches!(
        manager.rollback("web", "ns", 99),
        Err(ReleaseError::NoSuchRevision(99))
    ));
}

#[test]
fn uninstall_deletes_in_reverse_order_and_is_terminal() {
    let (server, manager) = harness();
    let chart = three_kind_chart();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &InstallOptions::default())
        .unwrap();
    let before_events = ClusterClient::new(&server.base_url()).events(0).unwrap().len() as u64;
    manager.uninstall("web", "ns").unwrap();

    let client = ClusterClient::new(&server.base_url());
    let deletes: Vec<String> = client
        .events(before_events)
        .unwrap()
        .into_iter()
        .filter(|e| e.verb == EventVerb::Delete)
        .map(|e| e.key.kind)
        .collect();
    assert_eq!(deletes, ["Deployment", "Secret", "Namespace"]);
    assert!(non_record_keys(&server).is_empty());

    // release records survive for history
    let history = manager.history("web", "ns").unwrap();
    assert_eq!(history.last().unwrap().status, RevisionStatus::Uninstalled);

    assert!(matches!(
        manager.uninstall("web", "ns"),
        Err(ReleaseError::NoSuchRelease { .. })
    ));
}

#[test]
fn history_and_list_releases() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions::default();
    manager
        .install(&chart, &chart.default_values, "a", "ns1", &opts)
        .unwrap();
    manager
        .install(&chart, &chart.default_values, "b", "ns2", &opts)
        .unwrap();
    manager
        .upgrade("a", "ns1", &chart, &chart.default_values, &opts)
        .unwrap();

    let history = manager.history("a", "ns1").unwrap();
    let statuses: Vec<RevisionStatus> = history.iter().map(|r| r.status).collect();
    assert_eq!(statuses, [RevisionStatus::Superseded, RevisionStatus::Deployed]);
    assert!(matches!(
        manager.history("ghost", "ns1"),
        Err(ReleaseError::NoSuchRelease { .. })
    ));

    assert_eq!(manager.list_releases(None).unwrap().len(), 2);
    let filtered = manager.list_releases(Some("ns2")).unwrap();
    assert_eq!(filtered.len(), 1);
    assert_eq!(filtered[0].0.name, "b");

    manager.uninstall("b", "ns2").unwrap();
    assert_eq!(manager.list_releases(None).unwrap().len(), 1);
}

#[test]
fn single_deployed_revision_invariant_holds_through_lifecycle() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions::default();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .unwrap();
    let check = |manager: &ReleaseManager| {
        let deployed = manager
            .history("web", "ns")
            .unwrap()
            .iter()
            .filter(|r| r.status == RevisionStatus::Deployed)
            .count();
        assert_eq!(deployed, 1);
    };
    check(&manager);
    manager.upgrade("web", "ns", &chart, &chart.default_values, &opts).unwrap();
    check(&manager);
    manager.rollback("web", "ns", 1).unwrap();
    check(&manager);
    // revision numbers stay gapless and monotonic
    let numbers: Vec<u32> = manager
        .history("web", "ns")
        .unwrap()
        .iter()
        .map(|r| r.number)
        .collect();
    assert_eq!(numbers, [1, 2, 3]);
}

#[test]
fn dependency_checked_at_install_time() {
    let (_server, manager) = harness();
    let mut chart = three_kind_chart();
    chart.metadata.dependencies.push(DependencyRef {
        name: "postgres".into(),
        version_constraint: VersionConstraint::parse("^1.0").unwrap(),
        repository: None,
    });
    let err = manager
        .install(&chart, &chart.default_values, "web", "ns", &InstallOptions::default())
        .unwrap_err();
    match err {
        ReleaseError::DependencyUnsatisfied(missing) => {
            assert_eq!(missing.len(), 1);
            assert!(missing[0].contains("postgres"));
        }
        other => panic!("unexpected {other:?}"),
    }

    // a bundled matching chart satisfies it
    let mut dep = chart_with("postgres", "1.2.0", &[]);
    dep.metadata.kind = ChartKind::Library;
    dep.templates.clear();
    chart.bundled_charts.push(dep);
    manager
        .install(&chart, &chart.default_values, "web", "ns", &InstallOptions::default())
        .unwrap();
}

#[test]
fn dependency_satisfied_by_installed_release() {
    let (_server, manager) = harness();
    let postgres = chart_with(
        "postgres",
        "1.2.0",
        &[(
            "ss.yaml",
            "apiVersion: apps/v1\nkind: StatefulSet\nmetadata:\n  name: pg\n",
        )],
    );
    manager
        .install(&postgres, &postgres.default_values, "db", "ns", &InstallOptions::default())
        .unwrap();

    let mut app = three_kind_chart();
    app.metadata.dependencies.push(DependencyRef {
        name: "postgres".into(),
        version_constraint: VersionConstraint::parse("^1.0").unwrap(),
        repository: None,
    });
    manager
        .install(&app, &app.default_values, "web", "ns", &InstallOptions::default())
        .unwrap();
}

#[test]
fn reinstall_after_uninstall_starts_at_revision_one() {
    let (_server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions::default();
    manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .unwrap();
    manager.upgrade("web", "ns", &chart, &chart.default_values, &opts).unwrap();
    manager.uninstall("web", "ns").unwrap();
    let release = manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .unwrap();
    assert_eq!(release.revisions[0].number, 1);
}

#[test]
fn post_render_identity_and_failure() {
    let dir = tempfile::tempdir().unwrap();
    let identity = write_hook(dir.path(), "identity.sh", "#!/bin/sh\ncat\n");
    let failing = write_hook(dir.path(), "fail.sh", "#!/bin/sh\necho boom >&2\nexit 1\n");

    let chart = three_kind_chart();
    let plain =
        release::render_release(&chart, &chart.default_values, "web", "ns", None).unwrap();
    let hooked =
        release::render_release(&chart, &chart.default_values, "web", "ns", Some(&identity))
            .unwrap();
    assert_eq!(plain, hooked);

    let err =
        release::render_release(&chart, &chart.default_values, "web", "ns", Some(&failing))
            .unwrap_err();
    match err {
        ReleaseError::PostRenderFailed { code, stderr } => {
            assert_eq!(code, 1);
            assert_eq!(stderr, "boom");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn post_render_failure_aborts_install_with_zero_resources() {
    let dir = tempfile::tempdir().unwrap();
    let failing = write_hook(dir.path(), "fail.sh", "#!/bin/sh\nexit 1\n");
    let (server, manager) = harness();
    let chart = three_kind_chart();
    let opts = InstallOptions {
        post_renderer: Some(failing),
        verify: None,
    };
    assert!(manager
        .install(&chart, &chart.default_values, "web", "ns", &opts)
        .is_err());
    assert!(server.resource_keys().is_empty());
}

#[test]
fn post_render_garbage_output_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = write_hook(dir.path(), "garbage.sh", "#!/bin/sh\necho '{{{ not yaml ['\n");
    let chart = three_kind_chart();
    let err =
        release::render_release(&chart, &chart.default_values, "web", "ns", Some(&garbage))
            .unwrap_err();
    assert!(matches!(err, ReleaseError::PostRenderMalformed(_)));
}
