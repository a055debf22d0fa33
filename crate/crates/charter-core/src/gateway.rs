//! The control-plane boundary: a JSON-over-REST client plus a bundled
//! in-memory mock server implementing the same contract for tests and demos.
//!
//! Routes (all JSON):
//!   PUT/GET/DELETE /api/v1/resources/{kind}/{namespace}/{name}
//!   POST           /api/v1/resources            (create-or-conflict)
//!   GET            /api/v1/resources?kind=&namespace=&labelSelector=
//!   GET            /api/v1/events?since=
//!
//! Cluster-scoped resources use the namespace literal `-` in paths.

use crate::manifest::ManifestDocument;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cluster unreachable: {0}")]
    Unreachable(String),
    #[error("server error {status}: {body}")]
    ServerError { status: u16, body: String },
    #[error("resource not found")]
    NotFound,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// Identity of one stored resource.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceKey {
    pub kind: String,
    /// Empty for cluster-scoped resources.
    pub namespace: String,
    pub name: String,
}

impl ResourceKey {
    pub fn of(doc: &ManifestDocument) -> ResourceKey {
        ResourceKey {
            kind: doc.kind.clone(),
            namespace: doc.namespace.clone().unwrap_or_default(),
            name: doc.name.clone(),
        }
    }

    fn path_namespace(&self) -> &str {
        if self.namespace.is_empty() {
            "-"
        } else {
            &self.namespace
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventVerb {
    Create,
    Update,
    Delete,
}

/// One mutation observed by the mock server; sequences are gapless and
/// strictly increasing per server lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvent {
    pub sequence: u64,
    pub verb: EventVerb,
    pub key: ResourceKey,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Created,
    Updated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeleteOutcome {
    Deleted,
    Absent,
}

// ---------------------------------------------------------------------------
// Client.

/// JSON/REST client for the control plane.
#[derive(Debug, Clone)]
pub struct ClusterClient {
    base_url: String,
    agent: ureq::Agent,
}

fn yaml_to_json(v: &serde_yaml::Value) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn json_to_yaml(v: &serde_json::Value) -> serde_yaml::Value {
    serde_yaml::to_value(v).unwrap_or(serde_yaml::Value::Null)
}

impl ClusterClient {
    pub fn new(base_url: &str) -> ClusterClient {
        ClusterClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(10))
                .build(),
        }
    }

    fn resource_url(&self, key: &ResourceKey) -> String {
        format!(
            "{}/api/v1/resources/{}/{}/{}",
            self.base_url,
            key.kind,
            key.path_namespace(),
            key.name
        )
    }

    fn map_err(e: ureq::Error) -> GatewayError {
        match e {
            ureq::Error::Status(404, _) => GatewayError::NotFound,
            ureq::Error::Status(status, response) => GatewayError::ServerError {
                status,
                body: response.into_string().unwrap_or_default(),
            },
            ureq::Error::Transport(t) => GatewayError::Unreachable(t.to_string()),
        }
    }

    /// Create-or-replace: create when the key is absent, full-body replace
    /// otherwise.
    pub fn apply(&self, doc: &ManifestDocument) -> Result<ApplyOutcome, GatewayError> {
        let key = ResourceKey::of(doc);
        let body = yaml_to_json(&doc.body);
        let response = self
            .agent
            .put(&self.resource_url(&key))
            .send_json(body)
            .map_err(Self::map_err)?;
        Ok(if response.status() == 201 {
            ApplyOutcome::Created
        } else {
            ApplyOutcome::Updated
        })
    }

    /// Idempotent delete: removing an absent key is not an error.
    pub fn delete(&self, key: &ResourceKey) -> Result<DeleteOutcome, GatewayError> {
        let response = self
            .agent
            .delete(&self.resource_url(key))
            .call()
            .map_err(Self::map_err)?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        match body.get("result").and_then(|v| v.as_str()) {
            Some("deleted") => Ok(DeleteOutcome::Deleted),
            Some("absent") => Ok(DeleteOutcome::Absent),
            _ => Err(GatewayError::MalformedResponse("missing result field".into())),
        }
    }

    pub fn get(&self, key: &ResourceKey) -> Result<ManifestDocument, GatewayError> {
        let response = self
            .agent
            .get(&self.resource_url(key))
            .call()
            .map_err(Self::map_err)?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        ManifestDocument::from_value(json_to_yaml(&body), 0)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))
    }

    /// Conjunctive filters; `label_selector` is a single `k=v` pair.
    pub fn list(
        &self,
        kind: Option<&str>,
        namespace: Option<&str>,
        label_selector: Option<&str>,
    ) -> Result<Vec<ManifestDocument>, GatewayError> {
        let mut request = self.agent.get(&format!("{}/api/v1/resources", self.base_url));
        if let Some(kind) = kind {
            request = request.query("kind", kind);
        }
        if let Some(ns) = namespace {
            request = request.query("namespace", ns);
        }
        if let Some(sel) = label_selector {
            request = request.query("labelSelector", sel);
        }
        let response = request.call().map_err(Self::map_err)?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let items = body
            .get("items")
            .and_then(|v| v.as_array())
            .ok_or_else(|| GatewayError::MalformedResponse("missing items".into()))?;
        items
            .iter()
            .map(|item| {
                ManifestDocument::from_value(json_to_yaml(item), 0)
                    .map_err(|e| GatewayError::MalformedResponse(e.to_string()))
            })
            .collect()
    }

    /// All events with sequence greater than `since`, in order.
    pub fn events(&self, since: u64) -> Result<Vec<ClusterEvent>, GatewayError> {
        let response = self
            .agent
            .get(&format!("{}/api/v1/events", self.base_url))
            .query("since", &since.to_string())
            .call()
            .map_err(Self::map_err)?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let events = body
            .get("events")
            .cloned()
            .ok_or_else(|| GatewayError::MalformedResponse("missing events".into()))?;
        serde_json::from_value(events).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Mock server.

#[derive(Default)]
struct ServerState {
    store: BTreeMap<ResourceKey, serde_json::Value>,
    events: Vec<ClusterEvent>,
    next_sequence: u64,
}

impl ServerState {
    fn record(&mut self, verb: EventVerb, key: ResourceKey) {
        self.next_sequence += 1;
        self.events.push(ClusterEvent {
            sequence: self.next_sequence,
            verb,
            key,
            timestamp: Utc::now(),
        });
    }
}

/// In-memory control plane honoring the gateway wire contract. All state
/// mutations serialize through one lock so the event log is totally ordered.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<Mutex<ServerState>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    snapshot_path: Option<PathBuf>,
}

fn label_match(body: &serde_json::Value, selector: &str) -> bool {
    let Some((k, v)) = selector.split_once('=') else {
        return false;
    };
    body.pointer(&format!("/metadata/labels/{k}"))
        .and_then(|x| x.as_str())
        .map(|x| x == v)
        .unwrap_or(false)
}

struct Response {
    status: u16,
    body: serde_json::Value,
}

fn handle_request(
    state: &Mutex<ServerState>,
    method: &str,
    path: &str,
    query: &BTreeMap<String, String>,
    body: &[u8],
) -> Response {
    let ok = |body: serde_json::Value| Response { status: 200, body };
    let err = |status: u16, msg: &str| Response {
        status,
        body: json!({ "error": msg }),
    };

    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    match (method, segments.as_slice()) {
        ("GET", ["api", "v1", "events"]) => {
            let since: u64 = query
                .get("since")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            let state = state.lock().unwrap();
            let events: Vec<&ClusterEvent> = state
                .events
                .iter()
                .filter(|e| e.sequence > since)
                .collect();
            ok(json!({ "events": events }))
        }
        ("GET", ["api", "v1", "resources"]) => {
            let state = state.lock().unwrap();
            let items: Vec<&serde_json::Value> = state
                .store
                .iter()
                .filter(|(key, body)| {
                    query.get("kind").map(|k| &key.kind == k).unwrap_or(true)
                        && query
                            .get("namespace")
                            .map(|ns| &key.namespace == ns)
                            .unwrap_or(true)
                        && query
                            .get("labelSelector")
                            .map(|sel| label_match(body, sel))
                            .unwrap_or(true)
                })
                .map(|(_, body)| body)
                .collect();
            ok(json!({ "items": items }))
        }
        ("POST", ["api", "v1", "resources"]) => {
            let Ok(doc): Result<serde_json::Value, _> = serde_json::from_slice(body) else {
                return err(400, "invalid json body");
            };
            let Some(key) = key_of_json(&doc) else {
                return err(400, "missing kind or metadata.name");
            };
            let mut state = state.lock().unwrap();
            if state.store.contains_key(&key) {
                return err(409, "resource already exists");
            }
            state.store.insert(key.clone(), doc);
            state.record(EventVerb::Create, key);
            Response {
                status: 201,
                body: json!({ "result": "created" }),
            }
        }
        (method, ["api", "v1", "resources", kind, namespace, name]) => {
            let key = ResourceKey {
                kind: kind.to_string(),
                namespace: if *namespace == "-" {
                    String::new()
                } else {
                    namespace.to_string()
                },
                name: name.to_string(),
            };
            match method {
                "GET" => {
                    let state = state.lock().unwrap();
                    match state.store.get(&key) {
                        Some(body) => ok(body.clone()),
                        None => err(404, "not found"),
                    }
                }
                "PUT" => {
                    let Ok(doc): Result<serde_json::Value, _> = serde_json::from_slice(body)
                    else {
                        return err(400, "invalid json body");
                    };
                    let mut state = state.lock().unwrap();
                    let existed = state.store.insert(key.clone(), doc).is_some();
                    let verb = if existed {
                        EventVerb::Update
                    } else {
                        EventVerb::Create
                    };
                    state.record(verb, key);
                    Response {
                        status: if existed { 200 } else { 201 },
                        body: json!({ "result": if existed { "updated" } else { "created" } }),
                    }
                }
                "DELETE" => {
                    let mut state = state.lock().unwrap();
                    let existed = state.store.remove(&key).is_some();
                    if existed {
                        state.record(EventVerb::Delete, key);
                    }
                    ok(json!({ "result": if existed { "deleted" } else { "absent" } }))
                }
                _ => err(405, "method not allowed"),
            }
        }
        _ => err(404, "no such route"),
    }
}

fn key_of_json(doc: &serde_json::Value) -> Option<ResourceKey> {
    let kind = doc.get("kind")?.as_str()?.to_string();
    let name = doc.pointer("/metadata/name")?.as_str()?.to_string();
    let namespace = doc
        .pointer("/metadata/namespace")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    Some(ResourceKey {
        kind,
        namespace,
        name,
    })
}

fn parse_query(raw: Option<&str>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some(raw) = raw {
        for pair in raw.split('&') {
            if let Some((k, v)) = pair.split_once('=') {
                // enough decoding for our parameter values
                let v = v.replace("%3D", "=").replace("%2F", "/").replace('+', " ");
                out.insert(k.to_string(), v);
            }
        }
    }
    out
}

impl MockServer {
    /// Bind and serve on `listen` (use port 0 for an ephemeral port).
    pub fn start(listen: &str) -> std::io::Result<MockServer> {
        Self::start_inner(listen, None)
    }

    /// Like `start`, but writes a JSON snapshot of the store on shutdown.
    pub fn start_with_snapshot(listen: &str, snapshot: PathBuf) -> std::io::Result<MockServer> {
        Self::start_inner(listen, Some(snapshot))
    }

    fn start_inner(listen: &str, snapshot_path: Option<PathBuf>) -> std::io::Result<MockServer> {
        let server = tiny_http::Server::http(listen)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::AddrInUse, e.to_string()))?;
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(addr) => addr,
            _ => unreachable!("http listener is always an ip socket"),
        };
        let state = Arc::new(Mutex::new(ServerState::default()));
        let stop = Arc::new(AtomicBool::new(false));

        let thread_state = Arc::clone(&state);
        let thread_stop = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            while !thread_stop.load(Ordering::Relaxed) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(mut request)) => {
                        let mut body = Vec::new();
                        let _ = request.as_reader().read_to_end(&mut body);
                        let url = request.url().to_string();
                        let (path, query) = match url.split_once('?') {
                            Some((p, q)) => (p.to_string(), Some(q.to_string())),
                            None => (url, None),
                        };
                        let response = handle_request(
                            &thread_state,
                            request.method().as_str(),
                            &path,
                            &parse_query(query.as_deref()),
                            &body,
                        );
                        let data = serde_json::to_vec(&response.body).unwrap_or_default();
                        let _ = request.respond(
                            tiny_http::Response::from_data(data)
                                .with_status_code(response.status)
                                .with_header(
                                    tiny_http::Header::from_bytes(
                                        &b"Content-Type"[..],
                                        &b"application/json"[..],
                                    )
                                    .unwrap(),
                                ),
                        );
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });

        Ok(MockServer {
            addr,
            state,
            stop,
            handle: Some(handle),
            snapshot_path,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Keys currently in the store (release-record inspection for tests).
    pub fn resource_keys(&self) -> Vec<ResourceKey> {
        self.state.lock().unwrap().store.keys().cloned().collect()
    }

    /// Event-sourcing consistency: fold the event log over an empty store
    /// and compare the resulting key set with the live store.
    pub fn store_matches_event_fold(&self) -> bool {
        let state = self.state.lock().unwrap();
        let mut folded: std::collections::BTreeSet<ResourceKey> = Default::default();
        for event in &state.events {
            match event.verb {
                EventVerb::Create | EventVerb::Update => {
                    folded.insert(event.key.clone());
                }
                EventVerb::Delete => {
                    folded.remove(&event.key);
                }
            }
        }
        folded == state.store.keys().cloned().collect()
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
        if let Some(path) = &self.snapshot_path {
            let state = self.state.lock().unwrap();
            let snapshot: Vec<(&ResourceKey, &serde_json::Value)> = state.store.iter().collect();
            if let Ok(json) = serde_json::to_vec_pretty(&snapshot) {
                let _ = std::fs::write(path, json);
            }
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}
