//! Compiles the graph into catalog documents, batches them and delivers the
//! batches with checkpointed retries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::collector::write_atomic;
use crate::graph::{relation_of_column, AttrValue, Entity, EntityType, GraphError, Guid, ProvenanceGraph, RelKind};

pub const DEFAULT_BATCH_SIZE: usize = 100;
const NAMESPACE: &str = "logprov";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFormat {
    #[default]
    AtlasJson,
    OpenlineageJson,
}

impl std::str::FromStr for TargetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "atlas_json" | "atlas" => Ok(TargetFormat::AtlasJson),
            "openlineage_json" | "openlineage" => Ok(TargetFormat::OpenlineageJson),
            _ => Err(format!("unknown target format {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Entity,
    Relationship,
    RunEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub kind: DocKind,
    /// Guid of the entity, or the guids of a relationship's ends.
    pub refs: Vec<Guid>,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// 1-based.
    pub id: usize,
    pub docs: Vec<Document>,
}

impl Batch {
    pub fn body(&self) -> Value {
        let pick = |k: DocKind| -> Vec<Value> {
            self.docs.iter().filter(|d| d.kind == k).map(|d| d.body.clone()).collect()
        };
        let mut m = Map::new();
        let ents = pick(DocKind::Entity);
        if !ents.is_empty() {
            m.insert("entities".into(), Value::Array(ents));
        }
        let rels = pick(DocKind::Relationship);
        if !rels.is_empty() {
            m.insert("relationships".into(), Value::Array(rels));
        }
        let runs = pick(DocKind::RunEvent);
        if !runs.is_empty() {
            m.insert("events".into(), Value::Array(runs));
        }
        Value::Object(m)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UploadError {
    #[error("graph does not validate: {0}")]
    ValidationFailure(String),
    #[error("sink unavailable after {attempts} attempts on batch {batch}: {reason}")]
    SinkUnavailable { batch: usize, attempts: u32, reason: String },
    #[error("upload checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("malformed graph document: {0}")]
    Malformed(String),
}

fn attr_json(v: &AttrValue) -> Value {
    match v {
        AttrValue::Int(i) => json!(i),
        AttrValue::Str(s) => json!(s),
    }
}

fn entity_doc(e: &Entity) -> Value {
    let mut attrs = Map::new();
    attrs.insert("qualifiedName".into(), json!(e.qualified_name));
    for (k, v) in &e.attributes {
        attrs.insert(k.clone(), attr_json(v));
    }
    if let Some(cm) = &e.column_mapping {
        attrs.insert("column_mapping".into(), json!(cm));
    }
    json!({
        "typeName": e.entity_type.type_name(),
        "guid": e.guid.to_string(),
        "updatedAt": e.updated_at,
        "attributes": attrs,
    })
}

fn end_doc(e: &Entity) -> Value {
    json!({
        "guid": e.guid.to_string(),
        "typeName": e.entity_type.type_name(),
        "uniqueAttributes": { "qualifiedName": e.qualified_name },
    })
}

fn uuid(g: Guid) -> String {
    let h = g.to_string();
    format!("{}-{}-{}-{}-{}", &h[..8], &h[8..12], &h[12..16], &h[16..20], &h[20..])
}

fn iso_time(us: i64) -> String {
    chrono::DateTime::from_timestamp_micros(us)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn ol_dataset(g: &ProvenanceGraph, guid: Guid, lineage: Option<&BTreeMap<String, Vec<Value>>>) -> Value {
    let e = g.entity(guid).expect("validated graph");
    let mut d = json!({ "namespace": NAMESPACE, "name": e.qualified_name });
    if let Some(fields) = lineage.filter(|f| !f.is_empty()) {
        let fields: Map<String, Value> =
            fields.iter().map(|(c, ins)| (c.clone(), json!({ "inputFields": ins }))).collect();
        d["facets"] = json!({ "columnLineage": { "fields": fields } });
    }
    d
}

fn run_event(g: &ProvenanceGraph, run: &Entity) -> Value {
    let job = g
        .out_of(RelKind::RunOf, run.guid)
        .into_iter()
        .next()
        .and_then(|s| g.entity(s))
        .map_or_else(|| run.qualified_name.clone(), |s| s.qualified_name.clone());
    let mut facets = Map::new();
    let attrs: Map<String, Value> = run.attributes.iter().map(|(k, v)| (k.clone(), attr_json(v))).collect();
    facets.insert("logprov_run".into(), Value::Object(attrs));
    if let Some(parent) = g.out_of(RelKind::SpawnedBy, run.guid).into_iter().next().and_then(|p| g.entity(p)) {
        facets.insert(
            "parent".into(),
            json!({ "run": { "runId": uuid(parent.guid) }, "job": { "namespace": NAMESPACE, "name": parent.qualified_name } }),
        );
    }

    // output relation -> output column -> input fields
    let mut lineage: BTreeMap<String, BTreeMap<String, Vec<Value>>> = BTreeMap::new();
    for (out, ins) in run.column_mapping.iter().flatten() {
        let (rel, col) = out.rsplit_once('#').unwrap_or((out, "*"));
        let fields = ins
            .iter()
            .map(|i| {
                let (r, c) = i.rsplit_once('#').unwrap_or((relation_of_column(i), "*"));
                json!({ "namespace": NAMESPACE, "name": r, "field": c })
            })
            .collect();
        lineage.entry(rel.to_string()).or_default().insert(col.to_string(), fields);
    }
    let inputs: Vec<Value> = sorted_by_name(g, g.into_of(RelKind::Input, run.guid))
        .into_iter()
        .map(|d| ol_dataset(g, d, None))
        .collect();
    let outputs: Vec<Value> = sorted_by_name(g, g.out_of(RelKind::Output, run.guid))
        .into_iter()
        .map(|d| {
            let name = &g.entity(d).expect("validated graph").qualified_name;
            ol_dataset(g, d, lineage.get(name))
        })
        .collect();
    json!({
        "eventType": "COMPLETE",
        "eventTime": iso_time(run.updated_at),
        "producer": NAMESPACE,
        "run": { "runId": uuid(run.guid), "facets": facets },
        "job": { "namespace": NAMESPACE, "name": job },
        "inputs": inputs,
        "outputs": outputs,
    })
}

fn sorted_by_name(g: &ProvenanceGraph, guids: BTreeSet<Guid>) -> Vec<Guid> {
    let mut v: Vec<Guid> = guids.into_iter().collect();
    v.sort_by(|a, b| g.entity(*a).map(|e| &e.qualified_name).cmp(&g.entity(*b).map(|e| &e.qualified_name)));
    v
}

/// Entity documents sorted by qualified name, then relationship documents.
/// OpenLineage output has one run event per run entity instead.
pub fn compile_graph(g: &ProvenanceGraph, target: TargetFormat) -> Result<Vec<Document>, UploadError> {
    g.validate().map_err(|e| UploadError::ValidationFailure(e.to_string()))?;
    let mut docs = Vec::new();
    match target {
        TargetFormat::AtlasJson => {
            for e in g.sorted_entities() {
                docs.push(Document { kind: DocKind::Entity, refs: vec![e.guid], body: entity_doc(e) });
            }
            for r in g.sorted_relationships() {
                let (f, t) = (g.entity(r.from).expect("validated"), g.entity(r.to).expect("validated"));
                docs.push(Document {
                    kind: DocKind::Relationship,
                    refs: vec![r.from, r.to],
                    body: json!({ "typeName": r.kind.name(), "end1": end_doc(f), "end2": end_doc(t) }),
                });
            }
        }
        TargetFormat::OpenlineageJson => {
            for e in g.sorted_entities().into_iter().filter(|e| e.entity_type.is_run()) {
                docs.push(Document { kind: DocKind::RunEvent, refs: vec![e.guid], body: run_event(g, e) });
            }
        }
    }
    Ok(docs)
}

/// Chunks documents into batches of at most `batch_size`. Entity documents
/// fill batches before any relationship document is placed.
pub fn partition_batches(docs: &[Document], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut out = Vec::new();
    let mut sorted: Vec<&Document> = docs.iter().collect();
    sorted.sort_by_key(|d| d.kind == DocKind::Relationship);
    let (ents, rels): (Vec<&Document>, Vec<&Document>) = sorted.into_iter().partition(|d| d.kind != DocKind::Relationship);
    for group in [ents, rels] {
        for chunk in group.chunks(batch_size) {
            out.push(Batch { id: out.len() + 1, docs: chunk.iter().map(|d| (*d).clone()).collect() });
        }
    }
    out
}

/// The whole graph as one Atlas-style document.
pub fn graph_to_json(g: &ProvenanceGraph) -> Result<String, UploadError> {
    let docs = compile_graph(g, TargetFormat::AtlasJson)?;
    let b = Batch { id: 0, docs };
    let mut body = b.body();
    let m = body.as_object_mut().expect("object");
    m.entry("entities").or_insert_with(|| json!([]));
    m.entry("relationships").or_insert_with(|| json!([]));
    Ok(serde_json::to_string_pretty(&body).expect("json serializes"))
}

/// Rebuilds a graph from Atlas-style entity and relationship documents.
pub fn graph_from_json(text: &str) -> Result<ProvenanceGraph, UploadError> {
    let bad = |m: &str| UploadError::Malformed(m.to_string());
    let v: Value = serde_json::from_str(text).map_err(|e| bad(&e.to_string()))?;
    let mut g = ProvenanceGraph::new();
    for d in v.get("entities").and_then(Value::as_array).into_iter().flatten() {
        let ty: EntityType =
            serde_json::from_value(d["typeName"].clone()).map_err(|e| bad(&format!("typeName: {e}")))?;
        let attrs = d["attributes"].as_object().ok_or_else(|| bad("entity without attributes"))?;
        let qn = attrs.get("qualifiedName").and_then(Value::as_str).ok_or_else(|| bad("entity without qualifiedName"))?;
        let mut e = Entity::new(ty, qn);
        e.updated_at = d["updatedAt"].as_i64().unwrap_or(0);
        for (k, val) in attrs {
            match (k.as_str(), val) {
                ("qualifiedName", _) => {}
                ("column_mapping", m) => {
                    e.column_mapping =
                        Some(serde_json::from_value(m.clone()).map_err(|e| bad(&format!("column_mapping: {e}")))?);
                }
                (_, Value::Number(n)) => {
                    e.attributes.insert(k.clone(), AttrValue::Int(n.as_i64().ok_or_else(|| bad("non-integer"))?));
                }
                (_, Value::String(s)) => {
                    e.attributes.insert(k.clone(), AttrValue::Str(s.clone()));
                }
                _ => return Err(bad(&format!("attribute {k} has an unsupported type"))),
            }
        }
        if let Some(gs) = d["guid"].as_str() {
            if gs != e.guid.to_string() {
                return Err(bad(&format!("guid of {qn} does not match its name")));
            }
        }
        g.upsert(e).map_err(|e: GraphError| bad(&e.to_string()))?;
    }
    for d in v.get("relationships").and_then(Value::as_array).into_iter().flatten() {
        let kind: RelKind = serde_json::from_value(d["typeName"].clone()).map_err(|e| bad(&format!("typeName: {e}")))?;
        let end = |k: &str| -> Result<Guid, UploadError> {
            let s = d[k]["guid"].as_str().ok_or_else(|| bad("relationship end without guid"))?;
            u128::from_str_radix(s, 16).map(Guid).map_err(|e| bad(&e.to_string()))
        };
        g.relate(kind, end("end1")?, end("end2")?);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base: Duration::from_secs(1), factor: 2, max_attempts: 5 }
    }
}

impl RetryPolicy {
    /// Wait before attempt `n + 1` after `n` failures.
    pub fn delay(&self, failures: u32) -> Duration {
        self.base * self.factor.saturating_pow(failures.saturating_sub(1))
    }
}

pub trait Sink {
    /// Delivers one batch. Errors are retried.
    fn send(&mut self, batch: &Batch) -> Result<(), String>;
    fn describe(&self) -> String;
}

pub struct FileSink {
    pub dir: PathBuf,
}

impl FileSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileSink { dir: dir.into() }
    }

    pub fn batch_path(&self, id: usize) -> PathBuf {
        self.dir.join(format!("batch-{id}.json"))
    }
}

impl Sink for FileSink {
    fn send(&mut self, batch: &Batch) -> Result<(), String> {
        fs::create_dir_all(&self.dir).map_err(|e| e.to_string())?;
        let text = serde_json::to_string_pretty(&batch.body()).expect("json serializes");
        write_atomic(&self.batch_path(batch.id), text.as_bytes()).map_err(|e| e.to_string())
    }

    fn describe(&self) -> String {
        self.dir.display().to_string()
    }
}

pub struct HttpSink {
    pub endpoint: String,
    agent: ureq::Agent,
}

impl HttpSink {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
        HttpSink { endpoint: endpoint.into().trim_end_matches('/').to_string(), agent }
    }
}

impl Sink for HttpSink {
    fn send(&mut self, batch: &Batch) -> Result<(), String> {
        let url = format!("{}/entities/bulk", self.endpoint);
        let body = serde_json::to_string(&batch.body()).expect("json serializes");
        match self.agent.post(&url).set("Content-Type", "application/json").send_string(&body) {
            Ok(_) => Ok(()),
            Err(ureq::Error::Status(code, _)) => Err(format!("HTTP {code}")),
            Err(e) => Err(e.to_string()),
        }
    }

    fn describe(&self) -> String {
        self.endpoint.clone()
    }
}

/// Progress of one graph's delivery. `digest` ties batch ids to the batches
/// they were computed from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadCheckpoint {
    pub delivered: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl UploadCheckpoint {
    pub fn load(path: &Path) -> Result<Self, UploadError> {
        match fs::read_to_string(path) {
            Ok(t) => serde_json::from_str(&t)
                .map_err(|e| UploadError::Checkpoint { path: path.display().to_string(), reason: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(UploadError::Checkpoint { path: path.display().to_string(), reason: e.to_string() }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), UploadError> {
        write_atomic(path, serde_json::to_string_pretty(self).expect("json serializes").as_bytes())
            .map_err(|e| UploadError::Checkpoint { path: path.display().to_string(), reason: e.to_string() })
    }
}

pub fn batches_digest(batches: &[Batch]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        h.update(b.id.to_le_bytes());
        h.update(serde_json::to_vec(&b.body()).expect("json serializes"));
    }
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReport {
    pub delivered: Vec<usize>,
    pub skipped: Vec<usize>,
    pub failed: Vec<usize>,
    /// Attempts per sent batch.
    pub attempts: BTreeMap<usize, u32>,
    pub log: Vec<String>,
}

/// Sends every batch not yet in the checkpoint, in order. The checkpoint is
/// updated (and persisted when `checkpoint_path` is set) after each delivery,
/// so a failed run can resume where it stopped.
pub fn upload(
    sink: &mut dyn Sink,
    batches: &[Batch],
    cp: &mut UploadCheckpoint,
    policy: &RetryPolicy,
    checkpoint_path: Option<&Path>,
) -> Result<UploadReport, UploadError> {
    let digest = batches_digest(batches);
    if cp.digest.as_deref() != Some(digest.as_str()) {
        cp.delivered.clear();
        cp.digest = Some(digest);
    }
    let mut report = UploadReport::default();
    for (i, b) in batches.iter().enumerate() {
        if cp.delivered.contains(&b.id) {
            report.skipped.push(b.id);
            continue;
        }
        let mut failures = 0;
        loop {
            let attempt = failures + 1;
            match sink.send(b) {
                Ok(()) => {
                    report.log.push(format!("batch {} attempt {attempt}: delivered", b.id));
                    report.attempts.insert(b.id, attempt);
                    report.delivered.push(b.id);
                    cp.delivered.insert(b.id);
                    if let Some(p) = checkpoint_path {
                        cp.save(p)?;
                    }
                    break;
                }
                Err(reason) => {
                    failures += 1;
                    report.log.push(format!("batch {} attempt {attempt}: {reason}", b.id));
                    if failures >= policy.max_attempts {
                        report.attempts.insert(b.id, attempt);
                        report.failed.extend(batches[i..].iter().map(|b| b.id));
                        if let Some(p) = checkpoint_path {
                            cp.save(p)?;
                        }
                        return Err(UploadError::SinkUnavailable { batch: b.id, attempts: attempt, reason });
                    }
                    thread::sleep(policy.delay(failures));
                }
            }
        }
    }
    Ok(report)
}

/// A minimal bulk-ingestion endpoint for tests: answers scripted status codes,
/// then 200, and keeps received entities by guid.
pub mod mock {
    use std::collections::{BTreeMap, BTreeSet, VecDeque};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::{Arc, Mutex};
    use std::thread;

    use serde_json::Value;

    #[derive(Default)]
    pub struct MockState {
        pub script: VecDeque<u16>,
        pub requests: usize,
        pub entities: BTreeMap<String, Value>,
        pub relationships: BTreeSet<String>,
    }

    pub struct MockSink {
        pub endpoint: String,
        pub state: Arc<Mutex<MockState>>,
    }

    impl MockSink {
        pub fn start(script: impl IntoIterator<Item = u16>) -> std::io::Result<Self> {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let endpoint = format!("http://{}", listener.local_addr()?);
            let state = Arc::new(Mutex::new(MockState { script: script.into_iter().collect(), ..Default::default() }));
            let st = state.clone();
            thread::spawn(move || {
                for stream in listener.incoming().flatten() {
                    let _ = serve(stream, &st);
                }
            });
            Ok(MockSink { endpoint, state })
        }

        pub fn push_script(&self, codes: impl IntoIterator<Item = u16>) {
            self.state.lock().unwrap().script.extend(codes);
        }

        pub fn entity_set(&self) -> BTreeMap<String, Value> {
            self.state.lock().unwrap().entities.clone()
        }

        pub fn requests(&self) -> usize {
            self.state.lock().unwrap().requests
        }
    }

    fn serve(stream: TcpStream, state: &Mutex<MockState>) -> std::io::Result<()> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut request_line = String::new();
        reader.read_line(&mut request_line)?;
        let mut len = 0usize;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body)?;

        let code = {
            let mut s = state.lock().unwrap();
            s.requests += 1;
            let code = s.script.pop_front().unwrap_or(200);
            let ok = request_line.starts_with("POST ") && request_line.contains("/entities/bulk");
            if code == 200 && ok {
                if let Ok(v) = serde_json::from_slice::<Value>(&body) {
                    for e in v.get("entities").and_then(Value::as_array).into_iter().flatten() {
                        if let Some(g) = e["guid"].as_str() {
                            s.entities.insert(g.to_string(), e.clone());
                        }
                    }
                    for r in v.get("relationships").and_then(Value::as_array).into_iter().flatten() {
                        s.relationships.insert(r.to_string());
                    }
                }
            }
            if ok {
                code
            } else {
                404
            }
        };
        let mut out = stream;
        write!(out, "HTTP/1.1 {code} Status\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")?;
        out.flush()
    }
}
