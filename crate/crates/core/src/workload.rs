//! Synthetic event logs with known ground truth.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogSet, CatalogState, Column, ObjectKind};
use crate::collector::MemorySource;
use crate::event::{log_file_name, parse_event_line, serialize_event, EventClass, EventKind, EventMetadata, QueryEvent};
use crate::graph::{names, EntityType, ProvenanceGraph, RelKind};
use crate::qqtree::QQTreeNode;
use crate::sql;
use crate::sql::ast::ObjectName;

pub const BASE_TS: i64 = 1_700_000_000_000_000;
pub const DEFAULT_PLAN_FACTOR: f64 = 9.0;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("log line {line}: {reason}")]
    BadLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Expected QQTree of one activity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthNode {
    pub class: EventClass,
    pub text: String,
    pub children: Vec<TruthNode>,
}

impl TruthNode {
    pub fn of(n: &QQTreeNode) -> TruthNode {
        TruthNode { class: n.class(), text: n.text().to_string(), children: n.children.iter().map(TruthNode::of).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthTree {
    pub activity_id: String,
    pub root: TruthNode,
}

/// A graph reduced to typed names and named edges, for set comparison.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphTruth {
    pub entities: BTreeSet<(EntityType, String)>,
    pub relationships: BTreeSet<(RelKind, String, String)>,
}

impl GraphTruth {
    pub fn of(g: &ProvenanceGraph) -> GraphTruth {
        let name = |guid| g.entity(guid).map_or_else(|| format!("{guid}"), |e| e.qualified_name.clone());
        GraphTruth {
            entities: g.entities().map(|e| (e.entity_type, e.qualified_name.clone())).collect(),
            relationships: g.relationships().map(|r| (r.kind, name(r.from), name(r.to))).collect(),
        }
    }

    /// Human-readable symmetric difference, capped.
    pub fn diff(&self, other: &GraphTruth, cap: usize) -> Vec<String> {
        let mut v = Vec::new();
        for e in self.entities.difference(&other.entities) {
            v.push(format!("- entity {e:?}"));
        }
        for e in other.entities.difference(&self.entities) {
            v.push(format!("+ entity {e:?}"));
        }
        for r in self.relationships.difference(&other.relationships) {
            v.push(format!("- rel {r:?}"));
        }
        for r in other.relationships.difference(&self.relationships) {
            v.push(format!("+ rel {r:?}"));
        }
        v.truncate(cap);
        v
    }

    pub fn size(&self) -> usize {
        self.entities.len() + self.relationships.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub trees: Vec<TruthTree>,
    pub graph: GraphTruth,
}

/// NDJSON log plus the catalog it runs against.
#[derive(Debug, Clone)]
pub struct GeneratedLog {
    pub ndjson: String,
    pub events: usize,
    pub catalog: CatalogSet,
    pub truth: Option<GroundTruth>,
}

impl GeneratedLog {
    pub fn bytes(&self) -> usize {
        self.ndjson.len()
    }

    pub fn source(&self) -> MemorySource {
        MemorySource::single(self.ndjson.clone())
    }

    pub fn parse_events(&self) -> Result<Vec<QueryEvent>, WorkloadError> {
        parse_lines(&self.ndjson)
    }

    /// Writes `events-0-<first_seq>.ndjson` files of at most `per_file` lines.
    pub fn write_dir(&self, dir: &Path, per_file: usize) -> Result<Vec<String>, WorkloadError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let lines: Vec<&str> = self.ndjson.lines().collect();
        for (i, chunk) in lines.chunks(per_file.max(1)).enumerate() {
            let first_seq = parse_event_line(chunk[0])
                .map_err(|e| WorkloadError::BadLog { line: i * per_file + 1, reason: e.to_string() })?
                .seq;
            let name = log_file_name(0, first_seq);
            let mut body = chunk.join("\n");
            body.push('\n');
            fs::write(dir.join(&name), body)?;
            written.push(name);
        }
        Ok(written)
    }
}

fn parse_lines(ndjson: &str) -> Result<Vec<QueryEvent>, WorkloadError> {
    ndjson
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_event_line(l).map_err(|e| WorkloadError::BadLog { line: i + 1, reason: e.to_string() }))
        .collect()
}

pub fn events_to_ndjson(events: &[QueryEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serialize_event(e));
        s.push('\n');
    }
    s
}

/// What a generated statement is: its text, the relations it reads and
/// writes, and the procedure it calls.
#[derive(Debug, Clone)]
struct GNode {
    class: EventClass,
    text: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    /// `schema.name` of the procedure whose body the children are.
    call: Option<String>,
    rows: Rows,
    children: Vec<GNode>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Rows {
    inserted: Option<i64>,
    updated: Option<i64>,
    deleted: Option<i64>,
    returned: Option<i64>,
}

impl GNode {
    fn stmt(class: EventClass, text: impl Into<String>, inputs: &[String], outputs: &[String]) -> GNode {
        GNode {
            class,
            text: text.into(),
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            call: None,
            rows: Rows::default(),
            children: vec![],
        }
    }

    fn truth(&self) -> TruthNode {
        TruthNode { class: self.class, text: self.text.clone(), children: self.children.iter().map(GNode::truth).collect() }
    }
}

#[derive(Debug, Clone)]
struct Client {
    username: String,
    app: String,
    host: String,
}

/// Expected graph of one activity: runs and statics per node, lineage
/// aggregated over each node's subtree.
fn add_truth(g: &mut GraphTruth, aid: &str, root: &GNode, server: &str, db: &str, c: &Client) {
    let conn = names::connection(server, &c.host, &c.app, &c.username);
    g.entities.insert((EntityType::ClientConnection, conn.clone()));
    walk_truth(g, aid, "0", root, None, None, db, &conn);
}

#[allow(clippy::too_many_arguments)]
fn walk_truth(
    g: &mut GraphTruth,
    aid: &str,
    node_id: &str,
    n: &GNode,
    enclosing: Option<&str>,
    parent_run: Option<&str>,
    db: &str,
    conn: &str,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let h = sql::text_hash(&n.text);
    let run = names::run(aid, node_id);
    let (sty, rty, ident) = match n.class {
        EventClass::SqlBatch => match &n.call {
            Some(p) => (EntityType::StoredProcedure, EntityType::StoredProcedureRun, p.clone()),
            None => (EntityType::Batch, EntityType::BatchRun, format!("batch-{h}")),
        },
        EventClass::SqlStatement => (EntityType::AdhocStatement, EntityType::AdhocStatementRun, format!("stmt-{h}")),
        EventClass::SpStatement => {
            let id = match enclosing {
                Some(p) => format!("{p}/stmt-{h}"),
                None => format!("stmt-{h}"),
            };
            (EntityType::SpStatement, EntityType::SpStatementRun, id)
        }
    };
    let stat = names::static_query(db, &ident);
    let mut processes = vec![(rty, run.clone()), (sty, stat.clone())];
    g.entities.insert((rty, run.clone()));
    g.entities.insert((sty, stat.clone()));
    g.relationships.insert((RelKind::RunOf, run.clone(), stat));
    g.relationships.insert((RelKind::ConnectionOf, run.clone(), conn.to_string()));
    if let Some(p) = parent_run {
        g.relationships.insert((RelKind::SpawnedBy, run.clone(), p.to_string()));
    }

    let (mut children_parent, mut children_enclosing) = (run.clone(), enclosing.map(str::to_string));
    if let Some(p) = &n.call {
        if n.class == EventClass::SqlBatch {
            children_enclosing = Some(p.clone());
        } else {
            let prun = format!("{run}/exec");
            let pstat = names::static_query(db, p);
            g.entities.insert((EntityType::StoredProcedureRun, prun.clone()));
            g.entities.insert((EntityType::StoredProcedure, pstat.clone()));
            g.relationships.insert((RelKind::RunOf, prun.clone(), pstat.clone()));
            g.relationships.insert((RelKind::ConnectionOf, prun.clone(), conn.to_string()));
            g.relationships.insert((RelKind::SpawnedBy, prun.clone(), run.clone()));
            processes.push((EntityType::StoredProcedureRun, prun.clone()));
            processes.push((EntityType::StoredProcedure, pstat));
            children_parent = prun;
            children_enclosing = Some(p.clone());
        }
    }

    let mut ins: BTreeSet<String> = n.inputs.iter().cloned().collect();
    let mut outs: BTreeSet<String> = n.outputs.iter().cloned().collect();
    for (i, ch) in n.children.iter().enumerate() {
        let (ci, co) =
            walk_truth(g, aid, &format!("{node_id}.{i}"), ch, children_enclosing.as_deref(), Some(&children_parent), db, conn);
        ins.extend(ci);
        outs.extend(co);
    }
    for d in ins.iter().chain(outs.iter()) {
        let ty = if d.starts_with("file://") { EntityType::ExternalFile } else { EntityType::Table };
        g.entities.insert((ty, d.clone()));
    }
    for (_, p) in &processes {
        for i in &ins {
            g.relationships.insert((RelKind::Input, i.clone(), p.clone()));
        }
        for o in &outs {
            g.relationships.insert((RelKind::Output, p.clone(), o.clone()));
        }
    }
    (ins, outs)
}

/// Emits the started/completed events of `n`'s subtree, advancing `clock`.
#[allow(clippy::too_many_arguments)]
fn emit_events(
    out: &mut Vec<QueryEvent>,
    aid: &str,
    n: &GNode,
    c: &Client,
    server: &str,
    db: &str,
    clock: &mut i64,
    rng: &mut ChaCha8Rng,
) {
    let meta = EventMetadata {
        username: c.username.clone(),
        client_app_name: c.app.clone(),
        client_host: c.host.clone(),
        server_name: server.to_string(),
        database_name: db.to_string(),
        ..Default::default()
    };
    let start = *clock;
    out.push(QueryEvent {
        activity_id: aid.to_string(),
        seq: 0,
        kind: EventKind::Started,
        class: n.class,
        timestamp: start,
        query_text: Some(n.text.clone()),
        metadata: meta.clone(),
        plan_payload: None,
        extras: Default::default(),
    });
    *clock += rng.gen_range(1..20);
    for ch in &n.children {
        emit_events(out, aid, ch, c, server, db, clock, rng);
        *clock += rng.gen_range(1..5);
    }
    *clock += rng.gen_range(1..30);
    let duration = *clock - start;
    let mut meta = meta;
    meta.duration_us = Some(duration);
    meta.cpu_time_us = Some(rng.gen_range(0..=duration));
    meta.rows_inserted = n.rows.inserted;
    meta.rows_updated = n.rows.updated;
    meta.rows_deleted = n.rows.deleted;
    meta.rows_returned = n.rows.returned;
    out.push(QueryEvent {
        activity_id: aid.to_string(),
        seq: 0,
        kind: EventKind::Completed,
        class: n.class,
        timestamp: *clock,
        query_text: Some(n.text.clone()),
        metadata: meta,
        plan_payload: None,
        extras: Default::default(),
    });
    *clock += 1;
}

fn sales_catalog(server: &str, db: &str) -> CatalogState {
    let mut c = CatalogState::new(server, db);
    let cols = |v: &[(&str, &str)]| v.iter().map(|(n, t)| Column::new(*n, *t)).collect::<Vec<_>>();
    let sales = [("CustomerId", "int"), ("Region", "varchar(32)"), ("Amount", "money")];
    c.create(ObjectKind::Table, &ObjectName::single("StagedSales"), cols(&sales), None);
    c.create(ObjectKind::Table, &ObjectName::single("SalesHistory"), cols(&sales), None);
    c.create(
        ObjectKind::Table,
        &ObjectName::single("ConversionRate"),
        cols(&[("Region", "varchar(32)"), ("Rate", "decimal(9,4)")]),
        None,
    );
    c
}

/// The stored-procedure workflow `EXECUTE SyncNewSales <version>` repeated
/// `repeats` times as activities `3`, `4`, ...
pub fn gen_running_example(version: u32, repeats: usize) -> Result<GeneratedLog, WorkloadError> {
    if !(1..=2).contains(&version) {
        return Err(WorkloadError::InvalidParam(format!("version must be 1 or 2, got {version}")));
    }
    if repeats == 0 {
        return Err(WorkloadError::InvalidParam("repeats must be at least 1".into()));
    }
    let (server, db) = ("srv", "sales");
    let ds = |t: &str| names::dataset(server, db, "dbo", t, 1);
    let insert = if version == 1 {
        GNode::stmt(
            EventClass::SpStatement,
            "INSERT SalesHistory SELECT c.CustomerId, c.Region, r.Rate * c.Amount AS Amount \
             FROM StagedSales c JOIN ConversionRate r ON c.Region = r.Region",
            &[ds("StagedSales"), ds("ConversionRate")],
            &[ds("SalesHistory")],
        )
    } else {
        GNode::stmt(
            EventClass::SpStatement,
            "INSERT SalesHistory SELECT * FROM StagedSales",
            &[ds("StagedSales")],
            &[ds("SalesHistory")],
        )
    };
    let clean = GNode {
        call: Some("dbo.CleanAndAppendSalesHistory".into()),
        children: vec![insert],
        ..GNode::stmt(EventClass::SpStatement, "EXECUTE CleanAndAppendSalesHistory @trackingSystemVersion", &[], &[])
    };
    let root = GNode {
        call: Some("dbo.SyncNewSales".into()),
        children: vec![
            GNode::stmt(
                EventClass::SpStatement,
                "IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') \
                 DELETE FROM TABLE StagedSales",
                &[],
                &[ds("StagedSales")],
            ),
            GNode::stmt(
                EventClass::SpStatement,
                "BULK INSERT StagedSales FROM 'newSales.csv'",
                &[names::file("newSales.csv")],
                &[ds("StagedSales")],
            ),
            clean,
        ],
        ..GNode::stmt(EventClass::SqlBatch, format!("EXECUTE SyncNewSales {version}"), &[], &[])
    };
    let client = Client { username: "etl".into(), app: "sqlcmd".into(), host: "h1".into() };
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(version));
    let mut clock = BASE_TS;
    let mut events = Vec::new();
    let mut truth = GroundTruth::default();
    for i in 0..repeats {
        let aid = (3 + i).to_string();
        emit_events(&mut events, &aid, &root, &client, server, db, &mut clock, &mut rng);
        clock += 60_000_000;
        truth.trees.push(TruthTree { activity_id: aid.clone(), root: root.truth() });
        add_truth(&mut truth.graph, &aid, &root, server, db, &client);
    }
    for (i, e) in events.iter_mut().enumerate() {
        e.seq = i as u64;
    }
    let mut catalog = CatalogSet::default();
    catalog.insert(sales_catalog(server, db));
    Ok(GeneratedLog { ndjson: events_to_ndjson(&events), events: events.len(), catalog, truth: Some(truth) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OltpParams {
    pub transactions: usize,
    pub clients: usize,
    pub sp_count: usize,
    pub loop_iters: usize,
    pub stmts_per_tx: usize,
    /// Procedure nesting levels below the batch; 1 means no procedure calls
    /// another.
    pub max_depth: usize,
    pub seed: u64,
    /// Build the ground-truth graph (costly for large runs).
    pub truth: bool,
}

impl Default for OltpParams {
    fn default() -> Self {
        OltpParams {
            transactions: 100,
            clients: 4,
            sp_count: 5,
            loop_iters: 8,
            stmts_per_tx: 109,
            max_depth: 1,
            seed: 1,
            truth: true,
        }
    }
}

struct TableSpec {
    name: &'static str,
    key: &'static str,
    cols: &'static [&'static str],
}

const TABLES: &[TableSpec] = &[
    TableSpec { name: "Warehouse", key: "w_id", cols: &["w_name", "w_ytd", "w_tax"] },
    TableSpec { name: "District", key: "d_id", cols: &["d_w_id", "d_ytd", "d_next_o_id", "d_tax"] },
    TableSpec { name: "Customer", key: "c_id", cols: &["c_d_id", "c_balance", "c_ytd_payment", "c_payment_cnt"] },
    TableSpec { name: "History", key: "h_c_id", cols: &["h_d_id", "h_w_id", "h_amount"] },
    TableSpec { name: "NewOrder", key: "no_o_id", cols: &["no_d_id", "no_w_id"] },
    TableSpec { name: "Orders", key: "o_id", cols: &["o_d_id", "o_c_id", "o_ol_cnt"] },
    TableSpec { name: "OrderLine", key: "ol_o_id", cols: &["ol_i_id", "ol_quantity", "ol_amount"] },
    TableSpec { name: "Item", key: "i_id", cols: &["i_price", "i_data"] },
    TableSpec { name: "Stock", key: "s_i_id", cols: &["s_quantity", "s_ytd", "s_order_cnt"] },
];

const PROC_NAMES: &[&str] = &["NewOrder", "Payment", "OrderStatus", "Delivery", "StockLevel"];
const MIX: &[u32] = &[45, 43, 4, 4, 4];
const DML_SHARE: f64 = 0.35;

fn proc_name(i: usize) -> String {
    match PROC_NAMES.get(i) {
        Some(n) => format!("dbo.{n}"),
        None => format!("dbo.Proc{:02}", i + 1),
    }
}

fn oltp_catalog(server: &str, db: &str) -> CatalogState {
    let mut c = CatalogState::new(server, db);
    for t in TABLES {
        let cols = std::iter::once(t.key).chain(t.cols.iter().copied()).map(|n| Column::new(n, "int")).collect();
        c.create(ObjectKind::Table, &ObjectName::single(t.name), cols, None);
    }
    c
}

/// One procedure body statement with known lineage. `tag` keeps texts of
/// different positions distinct.
fn dml(rng: &mut ChaCha8Rng, tag: &str, ds: &dyn Fn(&str) -> String) -> GNode {
    let t = &TABLES[rng.gen_range(0..TABLES.len())];
    let v = t.cols[rng.gen_range(0..t.cols.len())];
    let n = rng.gen_range(1..20);
    let sp = EventClass::SpStatement;
    match rng.gen_range(0..5) {
        0 => {
            let mut g = GNode::stmt(
                sp,
                format!("UPDATE {} SET {v} = {v} + @p{tag} WHERE {} = @k{tag}", t.name, t.key),
                &[ds(t.name)],
                &[ds(t.name)],
            );
            g.rows.updated = Some(n);
            g
        }
        1 => {
            let mut g = GNode::stmt(sp, format!("SELECT @p{tag} = {v} FROM {} WHERE {} = @k{tag}", t.name, t.key), &[ds(t.name)], &[]);
            g.rows.returned = Some(1);
            g
        }
        2 => {
            let s = &TABLES[rng.gen_range(0..TABLES.len())];
            let sv = s.cols[rng.gen_range(0..s.cols.len())];
            let mut g = GNode::stmt(
                sp,
                format!(
                    "INSERT {} ({}, {v}) SELECT {}, {sv} FROM {} WHERE {} = @k{tag}",
                    t.name, t.key, s.key, s.name, s.key
                ),
                &[ds(s.name)],
                &[ds(t.name)],
            );
            g.rows.inserted = Some(n);
            g
        }
        3 => {
            let mut g = GNode::stmt(
                sp,
                format!("INSERT {} ({}, {v}) VALUES (@k{tag}, @p{tag})", t.name, t.key),
                &[],
                &[ds(t.name)],
            );
            g.rows.inserted = Some(1);
            g
        }
        _ => {
            let mut g = GNode::stmt(sp, format!("DELETE FROM {} WHERE {} = @k{tag}", t.name, t.key), &[], &[ds(t.name)]);
            g.rows.deleted = Some(n);
            g
        }
    }
}

fn control(rng: &mut ChaCha8Rng, tag: &str) -> GNode {
    let n = rng.gen_range(1..100);
    let text = match rng.gen_range(0..3) {
        0 => format!("SET @v{tag} = @v{tag} + {n}"),
        1 => format!("DECLARE @v{tag} int"),
        _ => format!("IF @v{tag} > {n} SET @v{tag} = {n}"),
    };
    GNode::stmt(EventClass::SpStatement, text, &[], &[])
}

/// Procedure bodies: a prefix, a WHILE loop unrolled `loop_iters` times, an
/// optional call to the next procedure of the chain, and a suffix.
struct ProcBody {
    pre: Vec<GNode>,
    loop_body: Vec<GNode>,
    call: Option<usize>,
    post: Vec<GNode>,
}

fn build_procs(p: &OltpParams, rng: &mut ChaCha8Rng, ds: &dyn Fn(&str) -> String) -> Vec<ProcBody> {
    (0..p.sp_count)
        .map(|i| {
            let loop_len = if p.stmts_per_tx >= 3 * p.loop_iters + 2 { 3 } else { 1 };
            let others = p.stmts_per_tx.saturating_sub(loop_len * p.loop_iters);
            let call = (p.max_depth > 1 && i % p.max_depth < p.max_depth - 1 && i + 1 < p.sp_count).then_some(i + 1);
            let mut stmts: Vec<GNode> = (0..others)
                .map(|j| {
                    let tag = format!("{i}_{j}");
                    if rng.gen_bool(DML_SHARE) {
                        dml(rng, &tag, ds)
                    } else {
                        control(rng, &tag)
                    }
                })
                .collect();
            let post = stmts.split_off(stmts.len() / 2);
            let t = &TABLES[rng.gen_range(0..TABLES.len())];
            let u = &TABLES[rng.gen_range(0..TABLES.len())];
            let tv = t.cols[0];
            let uv = u.cols[0];
            let mut upd = GNode::stmt(
                EventClass::SpStatement,
                format!("UPDATE {} SET {uv} = {uv} - 1 WHERE {} = @i", u.name, u.key),
                &[ds(u.name)],
                &[ds(u.name)],
            );
            upd.rows.updated = Some(1);
            let mut sel = GNode::stmt(
                EventClass::SpStatement,
                format!("SELECT @x = {tv} FROM {} WHERE {} = @i", t.name, t.key),
                &[ds(t.name)],
                &[],
            );
            sel.rows.returned = Some(1);
            let loop_body = if loop_len == 3 {
                vec![GNode::stmt(EventClass::SpStatement, "SET @i = @i + 1", &[], &[]), sel, upd]
            } else {
                vec![upd]
            };
            ProcBody { pre: stmts, loop_body, call, post }
        })
        .collect()
}

fn instantiate(procs: &[ProcBody], i: usize, loop_iters: usize) -> Vec<GNode> {
    let b = &procs[i];
    let mut v = b.pre.clone();
    for _ in 0..loop_iters {
        v.extend(b.loop_body.iter().cloned());
    }
    if let Some(j) = b.call {
        let name = proc_name(j);
        v.push(GNode {
            call: Some(name.clone()),
            children: instantiate(procs, j, loop_iters),
            ..GNode::stmt(EventClass::SpStatement, format!("EXEC {name} @w_id = @w_id"), &[], &[])
        });
    }
    v.extend(b.post.iter().cloned());
    v
}

fn pick_proc(rng: &mut ChaCha8Rng, sp_count: usize) -> usize {
    let w: Vec<u32> = (0..sp_count).map(|i| MIX.get(i).copied().unwrap_or(4)).collect();
    let total: u32 = w.iter().sum();
    let mut r = rng.gen_range(0..total);
    for (i, x) in w.iter().enumerate() {
        if r < *x {
            return i;
        }
        r -= x;
    }
    sp_count - 1
}

struct ClientStream {
    client: Client,
    pending: VecDeque<QueryEvent>,
    clock: i64,
    remaining: usize,
}

/// OLTP-style load: `clients` concurrent streams of stored-procedure
/// transactions, one activity each, interleaved by timestamp.
pub fn gen_oltp(p: &OltpParams) -> Result<GeneratedLog, WorkloadError> {
    for (name, v) in [
        ("transactions", p.transactions),
        ("clients", p.clients),
        ("sp_count", p.sp_count),
        ("loop_iters", p.loop_iters),
        ("stmts_per_tx", p.stmts_per_tx),
        ("max_depth", p.max_depth),
    ] {
        if v == 0 {
            return Err(WorkloadError::InvalidParam(format!("{name} must be at least 1")));
        }
    }
    let (server, db) = ("srv", "tpcc");
    let ds = |t: &str| names::dataset(server, db, "dbo", t, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let procs = build_procs(p, &mut rng, &ds);
    let bodies: Vec<Vec<GNode>> = (0..p.sp_count).map(|i| instantiate(&procs, i, p.loop_iters)).collect();

    let mut streams: Vec<ClientStream> = (0..p.clients)
        .map(|c| ClientStream {
            client: Client {
                username: format!("user{}", c % 4),
                app: "oltp-driver".into(),
                host: format!("host{c:02}"),
            },
            pending: VecDeque::new(),
            clock: BASE_TS + rng.gen_range(0..1000),
            remaining: p.transactions / p.clients + usize::from(c < p.transactions % p.clients),
        })
        .collect();

    let mut truth = p.truth.then(GroundTruth::default);
    let mut next_tx = 0usize;
    let mut refill = |s: &mut ClientStream, rng: &mut ChaCha8Rng, truth: &mut Option<GroundTruth>| {
        if s.remaining == 0 {
            return;
        }
        s.remaining -= 1;
        let aid = format!("tx-{next_tx:06}");
        next_tx += 1;
        let proc = pick_proc(rng, p.sp_count);
        let name = proc_name(proc);
        let root = GNode {
            call: Some(name.clone()),
            children: bodies[proc].clone(),
            ..GNode::stmt(
                EventClass::SqlBatch,
                format!("EXEC {name} @w_id = {}, @d_id = {}", rng.gen_range(1..=10), rng.gen_range(1..=10)),
                &[],
                &[],
            )
        };
        // think time, roughly exponential
        let u: f64 = rng.gen_range(1e-6..1.0);
        s.clock += (-u.ln() * 2_000.0) as i64 + 1;
        let mut evs = Vec::new();
        emit_events(&mut evs, &aid, &root, &s.client, server, db, &mut s.clock, rng);
        if let Some(t) = truth.as_mut() {
            t.trees.push(TruthTree { activity_id: aid.clone(), root: root.truth() });
            add_truth(&mut t.graph, &aid, &root, server, db, &s.client);
        }
        s.pending.extend(evs);
    };

    let mut heap = BinaryHeap::new();
    for (i, s) in streams.iter_mut().enumerate() {
        refill(s, &mut rng, &mut truth);
        if let Some(e) = s.pending.front() {
            heap.push(Reverse((e.timestamp, i)));
        }
    }
    let mut ndjson = String::new();
    let mut seq = 0u64;
    while let Some(Reverse((_, i))) = heap.pop() {
        let s = &mut streams[i];
        let mut e = s.pending.pop_front().expect("heap entries have a pending event");
        e.seq = seq;
        seq += 1;
        ndjson.push_str(&serialize_event(&e));
        ndjson.push('\n');
        if s.pending.is_empty() {
            refill(s, &mut rng, &mut truth);
        }
        if let Some(e) = s.pending.front() {
            heap.push(Reverse((e.timestamp, i)));
        }
    }
    let mut catalog = CatalogSet::default();
    catalog.insert(oltp_catalog(server, db));
    Ok(GeneratedLog { ndjson, events: seq as usize, catalog, truth })
}

fn plan_eligible(e: &QueryEvent) -> bool {
    if e.kind != EventKind::Completed || e.class == EventClass::SqlBatch || e.is_plan_profile() {
        return false;
    }
    let first: String = e.text().trim_start().chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    ["SELECT", "INSERT", "UPDATE", "DELETE", "MERGE", "BULK"].iter().any(|k| first.eq_ignore_ascii_case(k))
}

/// Adds one plan-profile event after every completed data-accessing
/// statement, sized so the log grows to about `(1 + factor)` times its bytes.
pub fn gen_plan_variant(log: &GeneratedLog, factor: f64, seed: u64) -> Result<GeneratedLog, WorkloadError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(WorkloadError::InvalidParam(format!("plan bytes factor must be positive, got {factor}")));
    }
    let events = log.parse_events()?;
    let plan_of = |e: &QueryEvent| QueryEvent {
        activity_id: e.activity_id.clone(),
        seq: 0,
        kind: EventKind::Completed,
        class: e.class,
        timestamp: e.timestamp,
        query_text: None,
        metadata: EventMetadata { cpu_time_us: e.metadata.cpu_time_us, duration_us: e.metadata.duration_us, ..e.metadata.clone() },
        plan_payload: Some(String::new()),
        extras: Default::default(),
    };
    let (mut eligible, mut overhead) = (0usize, 0usize);
    for e in events.iter().filter(|e| plan_eligible(e)) {
        eligible += 1;
        overhead += serialize_event(&plan_of(e)).len() + 1;
    }
    if eligible == 0 {
        return Ok(log.clone());
    }
    let target = (factor * log.bytes() as f64) as usize;
    let payload_len = (target.saturating_sub(overhead) / eligible).max(1);

    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block: String = (0..payload_len + 4096).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char).collect();

    let mut ndjson = String::with_capacity(log.bytes() + target + 1024);
    let mut seq = 0u64;
    let mut push = |mut e: QueryEvent, ndjson: &mut String| {
        e.seq = seq;
        seq += 1;
        ndjson.push_str(&serialize_event(&e));
        ndjson.push('\n');
    };
    for e in events {
        let plan = plan_eligible(&e).then(|| {
            let mut pe = plan_of(&e);
            let off = rng.gen_range(0..4096);
            pe.plan_payload = Some(block[off..off + payload_len].to_string());
            pe
        });
        push(e, &mut ndjson);
        if let Some(pe) = plan {
            push(pe, &mut ndjson);
        }
    }
    Ok(GeneratedLog { ndjson, events: seq as usize, catalog: log.catalog.clone(), truth: log.truth.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qqtree::{build_qqtree, Activity};
    use std::collections::BTreeMap;

    fn group(log: &GeneratedLog) -> Vec<Activity> {
        let mut m: BTreeMap<String, Vec<QueryEvent>> = BTreeMap::new();
        for e in log.parse_events().unwrap() {
            m.entry(e.activity_id.clone()).or_default().push(e);
        }
        m.into_iter().map(|(k, v)| Activity::new(k, v)).collect()
    }

    #[test]
    fn running_example_shape() {
        let log = gen_running_example(2, 1).unwrap();
        assert_eq!(log.events, 10);
        let acts = group(&log);
        assert_eq!(acts.len(), 1);
        let t = build_qqtree(&acts[0]).unwrap();
        let truth = log.truth.as_ref().unwrap();
        assert_eq!(TruthNode::of(&t.root), truth.trees[0].root);
        let texts: Vec<&str> = t.preorder().iter().map(|n| n.text()).collect();
        assert_eq!(texts[0], "EXECUTE SyncNewSales 2");
        assert_eq!(texts[4], "INSERT SalesHistory SELECT * FROM StagedSales");
        assert_eq!(t.root.children[2].children.len(), 1);
    }

    #[test]
    fn version_one_joins_conversion_rate() {
        let log = gen_running_example(1, 1).unwrap();
        assert!(log.ndjson.contains("StagedSales c JOIN ConversionRate r"));
        let g = &log.truth.unwrap().graph;
        assert!(g.relationships.contains(&(
            RelKind::Input,
            names::dataset("srv", "sales", "dbo", "ConversionRate", 1),
            "q://sales/dbo.SyncNewSales".to_string()
        )));
    }

    #[test]
    fn repeats_share_statics() {
        let one = gen_running_example(2, 1).unwrap().truth.unwrap().graph;
        let two = gen_running_example(2, 2).unwrap().truth.unwrap().graph;
        let statics = |g: &GraphTruth| -> BTreeSet<(EntityType, String)> {
            g.entities.iter().filter(|(t, _)| !t.is_run()).cloned().collect()
        };
        assert_eq!(statics(&one), statics(&two));
        assert!(two.entities.len() > one.entities.len());
    }

    #[test]
    fn bad_params_are_rejected() {
        assert!(gen_running_example(3, 1).is_err());
        assert!(gen_running_example(1, 0).is_err());
        assert!(gen_oltp(&OltpParams { clients: 0, ..Default::default() }).is_err());
        let log = gen_running_example(2, 1).unwrap();
        assert!(gen_plan_variant(&log, 0.0, 1).is_err());
        assert!(gen_plan_variant(&log, -1.0, 1).is_err());
    }

    #[test]
    fn oltp_single_transaction() {
        let log = gen_oltp(&OltpParams { transactions: 1, clients: 1, ..Default::default() }).unwrap();
        let acts = group(&log);
        assert_eq!(acts.len(), 1);
        let t = build_qqtree(&acts[0]).unwrap();
        assert_eq!(t.root.children.len(), 109);
        assert_eq!(log.events, 220);
    }

    #[test]
    fn oltp_is_deterministic_and_interleaved() {
        let p = OltpParams { transactions: 40, clients: 4, ..Default::default() };
        let a = gen_oltp(&p).unwrap();
        assert_eq!(a.ndjson, gen_oltp(&p).unwrap().ndjson);
        assert_ne!(a.ndjson, gen_oltp(&OltpParams { seed: 2, ..p }).unwrap().ndjson);
        let evs = a.parse_events().unwrap();
        let switches = evs.windows(2).filter(|w| w[0].activity_id != w[1].activity_id).count();
        assert!(switches > 40, "clients should interleave, got {switches} switches");
        assert!(evs.windows(2).all(|w| w[0].order_key() < w[1].order_key()));
    }

    #[test]
    fn nesting_reaches_requested_depth() {
        let p = OltpParams { transactions: 30, clients: 3, sp_count: 35, max_depth: 6, stmts_per_tx: 12, loop_iters: 2, ..Default::default() };
        let log = gen_oltp(&p).unwrap();
        let h = group(&log).iter().map(|a| build_qqtree(a).unwrap().height()).max().unwrap();
        assert_eq!(h, 6);
    }

    #[test]
    fn plan_variant_ratio_and_counts() {
        let log = gen_running_example(2, 1).unwrap();
        let q = gen_plan_variant(&log, DEFAULT_PLAN_FACTOR, 7).unwrap();
        let ratio = q.bytes() as f64 / log.bytes() as f64;
        assert!((8.0..=18.0).contains(&ratio), "ratio {ratio}");
        let acts = group(&q);
        assert_eq!(TruthNode::of(&build_qqtree(&acts[0]).unwrap().root), log.truth.unwrap().trees[0].root);

        let oltp = gen_oltp(&OltpParams { transactions: 20, clients: 2, truth: false, ..Default::default() }).unwrap();
        let q = gen_plan_variant(&oltp, DEFAULT_PLAN_FACTOR, 7).unwrap();
        let per_tx = q.events as f64 / 20.0;
        assert!((240.0..=290.0).contains(&per_tx), "{per_tx} events per transaction");
        assert!(oltp.events as f64 / 20.0 <= 222.0);
    }

    #[test]
    fn write_dir_splits_files() {
        let dir = tempfile::tempdir().unwrap();
        let log = gen_running_example(2, 3).unwrap();
        let files = log.write_dir(dir.path(), 12).unwrap();
        assert_eq!(files, ["events-0-0.ndjson", "events-0-12.ndjson", "events-0-24.ndjson"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn every_generated_activity_builds(
                transactions in 1usize..12,
                clients in 1usize..5,
                sp_count in 1usize..8,
                loop_iters in 1usize..6,
                stmts_per_tx in 1usize..30,
                max_depth in 1usize..4,
                seed in 0u64..1000,
            ) {
                let p = OltpParams { transactions, clients, sp_count, loop_iters, stmts_per_tx, max_depth, seed, truth: true };
                let log = gen_oltp(&p).unwrap();
                let acts = group(&log);
                prop_assert_eq!(acts.len(), transactions);
                let truth = log.truth.unwrap();
                let by_id: BTreeMap<_, _> = truth.trees.iter().map(|t| (t.activity_id.clone(), &t.root)).collect();
                for a in &acts {
                    let t = build_qqtree(a).unwrap();
                    prop_assert_eq!(&TruthNode::of(&t.root), by_id[&a.activity_id]);
                }
            }
        }
    }
}
