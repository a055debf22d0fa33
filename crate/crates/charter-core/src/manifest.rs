//! Multi-document manifest streams: parsing, validation, serialization and
//! the canonical kind ordering used for install and uninstall.

use serde_yaml::Value;
use std::collections::BTreeMap;
use thiserror::Error;

/// The 34 resource kinds applied in order during install, Namespace first,
/// APIService last. Kinds not in this list sort after all known kinds.
pub const INSTALL_ORDER: [&str; 34] = [
    "Namespace",
    "NetworkPolicy",
    "ResourceQuota",
    "LimitRange",
    "PodSecurityPolicy",
    "PodDisruptionBudget",
    "ServiceAccount",
    "Secret",
    "SecretList",
    "ConfigMap",
    "StorageClass",
    "PersistentVolume",
    "PersistentVolumeClaim",
    "CustomResourceDefinition",
    "ClusterRole",
    "ClusterRoleList",
    "ClusterRoleBinding",
    "ClusterRoleBindingList",
    "Role",
    "RoleList",
    "RoleBinding",
    "RoleBindingList",
    "Service",
    "DaemonSet",
    "Pod",
    "ReplicationController",
    "ReplicaSet",
    "Deployment",
    "HorizontalPodAutoscaler",
    "StatefulSet",
    "Job",
    "CronJob",
    "Ingress",
    "APIService",
];

/// Kinds that never live in a namespace; apply-time namespace defaulting
/// skips these.
pub const CLUSTER_SCOPED_KINDS: [&str; 10] = [
    "Namespace",
    "PodSecurityPolicy",
    "StorageClass",
    "PersistentVolume",
    "CustomResourceDefinition",
    "ClusterRole",
    "ClusterRoleList",
    "ClusterRoleBinding",
    "ClusterRoleBindingList",
    "APIService",
];

pub fn is_cluster_scoped(kind: &str) -> bool {
    CLUSTER_SCOPED_KINDS.contains(&kind)
}

/// Total order over the known kinds.
#[derive(Debug, Clone)]
pub struct KindOrder {
    index: BTreeMap<&'static str, usize>,
}

impl Default for KindOrder {
    fn default() -> Self {
        let index = INSTALL_ORDER
            .iter()
            .enumerate()
            .map(|(i, k)| (*k, i))
            .collect();
        KindOrder { index }
    }
}

impl KindOrder {
    /// Position of a kind in the install order, or None for unknown kinds.
    pub fn position(&self, kind: &str) -> Option<usize> {
        self.index.get(kind).copied()
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed yaml in document {doc_index}: {message}")]
    MalformedYaml { doc_index: usize, message: String },
    #[error("document {doc_index} is missing required field `{field}`")]
    MissingField { doc_index: usize, field: String },
}

/// One typed resource description parsed from a YAML stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestDocument {
    pub api_version: String,
    pub kind: String,
    pub name: String,
    pub namespace: Option<String>,
    pub labels: BTreeMap<String, String>,
    /// Full document tree; the fields above are extracted views of it.
    pub body: Value,
}

impl ManifestDocument {
    /// Build a document from a parsed YAML tree, validating required fields.
    pub fn from_value(body: Value, doc_index: usize) -> Result<Self, ManifestError> {
        let get_str = |v: &Value, key: &str| -> Option<String> {
            v.get(key).and_then(|x| x.as_str()).map(|s| s.to_string())
        };
        let missing = |field: &str| ManifestError::MissingField {
            doc_index,
            field: field.to_string(),
        };

        let api_version = get_str(&body, "apiVersion")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| missing("apiVersion"))?;
        let kind = get_str(&body, "kind")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| missing("kind"))?;
        let metadata = body.get("metadata").cloned().unwrap_or(Value::Null);
        let name = get_str(&metadata, "name")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| missing("metadata.name"))?;
        let namespace = get_str(&metadata, "namespace");
        let mut labels = BTreeMap::new();
        if let Some(map) = metadata.get("labels").and_then(|v| v.as_mapping()) {
            for (k, v) in map {
                if let (Some(k), Some(v)) = (k.as_str(), v.as_str()) {
                    labels.insert(k.to_string(), v.to_string());
                }
            }
        }
        Ok(ManifestDocument {
            api_version,
            kind,
            name,
            namespace,
            labels,
            body,
        })
    }

    /// Canonical YAML serialization of the full document tree.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&self.body).expect("document tree serializes")
    }
}

/// Split a stream on `---` separators at column 0 only; a separator inside a
/// block scalar is indented and therefore never splits.
fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        let trimmed = line.trim_end();
        if trimmed == "---" || (line.starts_with("--- ") && !line.starts_with("----")) {
            docs.push(std::mem::take(&mut current));
            // `--- inline content` starts the next document on the same line
            let rest = line.strip_prefix("---").unwrap().trim_start();
            if !rest.is_empty() {
                current.push_str(rest);
                current.push('\n');
            }
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    docs.push(current);
    docs
}

/// Parse a `---`-separated UTF-8 stream into documents, skipping empty ones.
/// Order of appearance is preserved.
pub fn parse_manifest_stream(text: &str) -> Result<Vec<ManifestDocument>, ManifestError> {
    let mut out = Vec::new();
    for chunk in split_documents(text) {
        let doc_index = out.len();
        let value: Value =
            serde_yaml::from_str(&chunk).map_err(|e| ManifestError::MalformedYaml {
                doc_index,
                message: e.to_string(),
            })?;
        if value.is_null() {
            continue;
        }
        out.push(ManifestDocument::from_value(value, doc_index)?);
    }
    Ok(out)
}

/// Join documents back into one `---`-separated stream.
pub fn serialize_manifest_stream(docs: &[ManifestDocument]) -> String {
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push_str("---\n");
        }
        out.push_str(&doc.to_yaml());
    }
    out
}

/// Stable sort into install order: known kinds by their position, unknown
/// kinds after all known kinds in first-appearance order.
pub fn sort_for_install(docs: &[ManifestDocument]) -> Vec<ManifestDocument> {
    let order = KindOrder::default();
    let mut sorted: Vec<ManifestDocument> = docs.to_vec();
    sorted.sort_by_key(|d| order.position(&d.kind).unwrap_or(INSTALL_ORDER.len()));
    sorted
}

/// Exact reverse of the install order.
pub fn sort_for_uninstall(docs: &[ManifestDocument]) -> Vec<ManifestDocument> {
    let mut sorted = sort_for_install(docs);
    sorted.reverse();
    sorted
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(kind: &str, name: &str) -> ManifestDocument {
        let text = format!(
            "apiVersion: v1\nkind: {kind}\nmetadata:\n  name: {name}\n"
        );
        let value: Value = serde_yaml::from_str(&text).unwrap();
        ManifestDocument::from_value(value, 0).unwrap()
    }

    // Independent comparator over the listed kinds, used as the sort oracle.
    fn oracle_sort(docs: &[ManifestDocument]) -> Vec<ManifestDocument> {
        let pos = |kind: &str| {
            INSTALL_ORDER
                .iter()
                .position(|k| *k == kind)
                .unwrap_or(usize::MAX)
        };
        let mut indexed: Vec<(usize, ManifestDocument)> =
            docs.iter().cloned().enumerate().collect();
        indexed.sort_by(|(ia, a), (ib, b)| {
            pos(&a.kind).cmp(&pos(&b.kind)).then(ia.cmp(ib))
        });
        indexed.into_iter().map(|(_, d)| d).collect()
    }

    #[test]
    fn empty_stream_parses_to_nothing() {
        assert!(parse_manifest_stream("").unwrap().is_empty());
    }

    #[test]
    fn single_document() {
        let docs =
            parse_manifest_stream("apiVersion: v1\nkind: Namespace\nmetadata:\n  name: demo\n")
                .unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].kind, "Namespace");
        assert_eq!(docs[0].name, "demo");
    }

    #[test]
    fn missing_kind_reports_document_index() {
        let text = "apiVersion: v1\nkind: Namespace\nmetadata:\n  name: a\n---\napiVersion: v1\nmetadata:\n  name: b\n";
        let err = parse_manifest_stream(text).unwrap_err();
        match err {
            ManifestError::MissingField { doc_index, field } => {
                assert_eq!(doc_index, 1);
                assert_eq!(field, "kind");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_yaml_reports_position() {
        let err = parse_manifest_stream("kind: [unclosed\n").unwrap_err();
        assert!(matches!(err, ManifestError::MalformedYaml { .. }));
    }

    #[test]
    fn separator_inside_block_scalar_does_not_split() {
        let text = "apiVersion: v1\nkind: ConfigMap\nmetadata:\n  name: c\ndata:\n  f: |\n    ---\n    not a separator\n";
        let docs = parse_manifest_stream(text).unwrap();
        assert_eq!(docs.len(), 1);
    }

    #[test]
    fn install_order_basic() {
        let docs = vec![doc("Deployment", "d"), doc("Namespace", "n"), doc("Secret", "s")];
        let sorted = sort_for_install(&docs);
        let kinds: Vec<&str> = sorted.iter().map(|d| d.kind.as_str()).collect();
        assert_eq!(kinds, ["Namespace", "Secret", "Deployment"]);
    }

    #[test]
    fn ties_keep_input_order() {
        let docs = vec![doc("Pod", "a"), doc("Pod", "b")];
        let sorted = sort_for_install(&docs);
        assert_eq!(sorted[0].name, "a");
        assert_eq!(sorted[1].name, "b");
    }

    #[test]
    fn unknown_kinds_sort_last() {
        let docs = vec![doc("MyCustomWidget", "w"), doc("Namespace", "n")];
        let sorted = sort_for_install(&docs);
        let kinds: Vec<&str> = sorted.iter().map(|d| d.kind.as_str()).collect();
        assert_eq!(kinds, ["Namespace", "MyCustomWidget"]);
        assert_eq!(
            sorted.iter().map(|d| d.kind.clone()).collect::<Vec<_>>(),
            oracle_sort(&docs).iter().map(|d| d.kind.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn uninstall_is_reverse_of_install() {
        let docs = vec![doc("Namespace", "n"), doc("Service", "s"), doc("Pod", "p")];
        let kinds: Vec<String> = sort_for_uninstall(&docs)
            .iter()
            .map(|d| d.kind.clone())
            .collect();
        assert_eq!(kinds, ["Pod", "Service", "Namespace"]);
        assert!(sort_for_uninstall(&[]).is_empty());
        let one = vec![doc("Pod", "p")];
        assert_eq!(sort_for_uninstall(&one).len(), 1);
    }

    #[test]
    fn kind_order_is_exactly_34_with_endpoints() {
        let order = KindOrder::default();
        assert_eq!(INSTALL_ORDER.len(), 34);
        assert_eq!(order.position("Namespace"), Some(0));
        assert_eq!(order.position("APIService"), Some(33));
        let mut seen = std::collections::HashSet::new();
        for k in INSTALL_ORDER {
            assert!(seen.insert(k), "duplicate kind {k}");
        }
    }

    proptest! {
        #[test]
        fn any_permutation_of_all_kinds_restores_listed_sequence(
            perm in Just(()).prop_perturb(|_, mut rng| {
                let mut v: Vec<usize> = (0..34).collect();
                for i in (1..v.len()).rev() {
                    let j = (rng.next_u64() as usize) % (i + 1);
                    v.swap(i, j);
                }
                v
            })
        ) {
            let docs: Vec<ManifestDocument> =
                perm.iter().map(|&i| doc(INSTALL_ORDER[i], "x")).collect();
            let kinds: Vec<String> = sort_for_install(&docs)
                .iter()
                .map(|d| d.kind.clone())
                .collect();
            prop_assert_eq!(kinds, INSTALL_ORDER.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        }

        #[test]
        fn uninstall_reverses_install_on_random_kind_lists(
            picks in proptest::collection::vec(0usize..40, 0..12)
        ) {
            let docs: Vec<ManifestDocument> = picks
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let kind = if p < 34 { INSTALL_ORDER[p].to_string() } else { format!("Custom{p}") };
                    doc(&kind, &format!("n{i}"))
                })
                .collect();
            let installed = sort_for_install(&docs);
            let mut reversed = installed.clone();
            reversed.reverse();
            prop_assert_eq!(sort_for_uninstall(&docs), reversed);
        }

        #[test]
        fn serialize_then_parse_is_identity(names in proptest::collection::vec("[a-z]{1,8}", 1..4)) {
            let docs: Vec<ManifestDocument> = names
                .iter()
                .enumerate()
                .map(|(i, n)| doc(INSTALL_ORDER[i % 34], n))
                .collect();
            let text = serialize_manifest_stream(&docs);
            let reparsed = parse_manifest_stream(&text).unwrap();
            prop_assert_eq!(docs, reparsed);
        }
    }
}
