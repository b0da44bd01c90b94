//! Process entities and run metadata from a QQTree.

use std::collections::BTreeMap;

use crate::event::EventClass;
use crate::graph::{names, Entity, EntityType, GraphError, Guid, ProvenanceGraph, RelKind};
use crate::qqtree::{is_exec_text, QQTree, QQTreeNode};
use crate::sql::{self, ast::Statement};

/// Entities a tree node produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeEntities {
    pub static_guid: Guid,
    pub run_guid: Guid,
    /// Procedure and procedure run invoked by an `EXEC` statement node.
    pub proc: Option<(Guid, Guid)>,
}

impl NodeEntities {
    /// Runs first, then statics.
    pub fn processes(&self) -> Vec<Guid> {
        let mut v = vec![self.run_guid];
        if let Some((_, r)) = self.proc {
            v.push(r);
        }
        v.push(self.static_guid);
        if let Some((s, _)) = self.proc {
            v.push(s);
        }
        v
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuntimeExtract {
    pub graph: ProvenanceGraph,
    pub node_map: BTreeMap<String, NodeEntities>,
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("activity {activity_id}: node {node_id} has no completed event")]
    IncompleteNode { activity_id: String, node_id: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Procedure invoked by `text`, as `schema.name`; `None` for anything else,
/// dynamic SQL included.
pub fn exec_target(text: &str) -> Option<String> {
    if !is_exec_text(text) {
        return None;
    }
    match sql::parse_statement(text) {
        Ok(Statement::Exec { proc: Some(p) }) => {
            let (schema, name) = crate::catalog::split_name(&p);
            Some(format!("{schema}.{name}"))
        }
        _ => None,
    }
}

/// Static identity of a node within its database.
fn identity(node: &QQTreeNode, enclosing_proc: Option<&str>) -> (EntityType, EntityType, String, Option<String>) {
    let text = node.text();
    match node.class() {
        EventClass::SqlBatch => match exec_target(text) {
            Some(p) => (EntityType::StoredProcedure, EntityType::StoredProcedureRun, p, None),
            None => (EntityType::Batch, EntityType::BatchRun, format!("batch-{}", sql::text_hash(text)), None),
        },
        EventClass::SqlStatement => (
            EntityType::AdhocStatement,
            EntityType::AdhocStatementRun,
            format!("stmt-{}", sql::text_hash(text)),
            exec_target(text),
        ),
        EventClass::SpStatement => {
            let id = match enclosing_proc {
                Some(p) => format!("{p}/stmt-{}", sql::text_hash(text)),
                None => format!("stmt-{}", sql::text_hash(text)),
            };
            (EntityType::SpStatement, EntityType::SpStatementRun, id, exec_target(text))
        }
    }
}

/// The procedure a node invokes, without computing its static identity.
pub fn invoked_procedure(node: &QQTreeNode) -> Option<String> {
    exec_target(node.text())
}

/// Static qualified name of a node and the procedure its children run in,
/// when it invokes one.
pub fn static_name(node: &QQTreeNode, enclosing_proc: Option<&str>) -> (String, Option<String>) {
    let (ty, _, ident, exec) = identity(node, enclosing_proc);
    let invoked = if ty == EntityType::StoredProcedure { Some(ident.clone()) } else { exec };
    (names::static_query(&node.started.metadata.database_name, &ident), invoked)
}

fn run_entity(ty: EntityType, qn: String, node: &QQTreeNode) -> Entity {
    let s = &node.started;
    let c = node.completed.as_ref().unwrap_or(s);
    let mut e = Entity::new(ty, qn)
        .with_attr("username", s.metadata.username.as_str())
        .with_attr("client_app_name", s.metadata.client_app_name.as_str())
        .with_attr("client_host", s.metadata.client_host.as_str())
        .with_attr("start_time_us", s.timestamp)
        .with_attr("end_time_us", c.timestamp);
    if let Some(v) = c.metadata.cpu_time_us {
        e = e.with_attr("cpu_time_us", v);
    }
    if let Some(v) = c.metadata.duration_us {
        e = e.with_attr("duration_us", v);
    }
    for (k, v) in c.metadata.row_counters() {
        if let Some(v) = v {
            e = e.with_attr(k, v);
        }
    }
    if node.compressed_iterations > 1 {
        e = e.with_attr("iterations", i64::from(node.compressed_iterations));
    }
    e.updated_at = s.timestamp;
    e
}

fn static_entity(ty: EntityType, qn: String, text: &str, name: Option<&str>, ts: i64) -> Entity {
    let mut e = Entity::new(ty, qn).with_attr("query_text", text);
    if let Some(n) = name {
        e = e.with_attr("name", n);
    }
    e.updated_at = ts;
    e
}

/// Upserts a static query; a repeat with identical attributes only advances
/// its timestamp.
fn upsert_static(
    g: &mut ProvenanceGraph,
    ty: EntityType,
    qn: String,
    text: &str,
    name: Option<&str>,
    ts: i64,
) -> Result<Guid, GraphError> {
    if let Some(guid) = g.by_name(&qn).filter(|e| e.entity_type == ty).map(|e| e.guid) {
        let e = g.entity_mut(guid).expect("named entity exists");
        if e.attr_str("query_text") == Some(text) && e.attr_str("name") == name {
            e.updated_at = e.updated_at.max(ts);
            return Ok(guid);
        }
    }
    g.upsert(static_entity(ty, qn, text, name, ts))
}

/// Pre-order walk emitting static and run entities per node.
pub fn extract_runtime(t: &QQTree) -> Result<RuntimeExtract, RuntimeError> {
    let mut graph = ProvenanceGraph::new();
    let node_map = extract_runtime_into(&mut graph, t)?;
    Ok(RuntimeExtract { graph, node_map })
}

fn first_incomplete(n: &QQTreeNode) -> Option<&QQTreeNode> {
    if n.completed.is_none() {
        return Some(n);
    }
    n.children.iter().find_map(first_incomplete)
}

/// [`extract_runtime`] writing into an existing graph. An incomplete tree is
/// rejected before anything is written; a type conflict can leave the
/// entities upserted before it.
pub fn extract_runtime_into(
    g: &mut ProvenanceGraph,
    t: &QQTree,
) -> Result<BTreeMap<String, NodeEntities>, RuntimeError> {
    if let Some(n) = first_incomplete(&t.root) {
        return Err(RuntimeError::IncompleteNode { activity_id: t.activity_id.clone(), node_id: n.node_id.clone() });
    }
    let mut node_map = BTreeMap::new();
    let root = &t.root.started;
    let m = &root.metadata;
    let mut conn = Entity::new(
        EntityType::ClientConnection,
        names::connection(&m.server_name, &m.client_host, &m.client_app_name, &m.username),
    )
    .with_attr("server_name", m.server_name.as_str())
    .with_attr("client_host", m.client_host.as_str())
    .with_attr("client_app_name", m.client_app_name.as_str())
    .with_attr("username", m.username.as_str());
    conn.updated_at = root.timestamp;
    let conn = g.upsert(conn)?;

    // (node, run the node is spawned by, procedure whose body it runs in)
    let mut stack: Vec<(&QQTreeNode, Option<Guid>, Option<String>)> = vec![(&t.root, None, None)];
    while let Some((node, parent_run, enclosing)) = stack.pop() {
        let db = &node.started.metadata.database_name;
        let ts = node.started.timestamp;
        let (static_ty, run_ty, ident, exec) = identity(node, enclosing.as_deref());
        let proc_name = (static_ty == EntityType::StoredProcedure).then_some(ident.as_str());
        let static_guid =
            upsert_static(g, static_ty, names::static_query(db, &ident), node.text(), proc_name, ts)?;
        let run_guid = g.upsert(run_entity(run_ty, names::run(&t.activity_id, &node.node_id), node))?;
        g.relate(RelKind::RunOf, run_guid, static_guid);
        g.relate(RelKind::ConnectionOf, run_guid, conn);
        if let Some(p) = parent_run {
            g.relate(RelKind::SpawnedBy, run_guid, p);
        }

        let mut child_parent = run_guid;
        let mut child_proc = if static_ty == EntityType::StoredProcedure { Some(ident.clone()) } else { enclosing.clone() };
        let mut proc = None;
        if let Some(p) = exec {
            let ps = upsert_static(g, EntityType::StoredProcedure, names::static_query(db, &p), node.text(), Some(&p), ts)?;
            let pr = g.upsert(run_entity(
                EntityType::StoredProcedureRun,
                format!("{}/exec", names::run(&t.activity_id, &node.node_id)),
                node,
            ))?;
            g.relate(RelKind::RunOf, pr, ps);
            g.relate(RelKind::ConnectionOf, pr, conn);
            g.relate(RelKind::SpawnedBy, pr, run_guid);
            child_parent = pr;
            child_proc = Some(p);
            proc = Some((ps, pr));
        }
        node_map.insert(node.node_id.clone(), NodeEntities { static_guid, run_guid, proc });
        for c in node.children.iter().rev() {
            stack.push((c, Some(child_parent), child_proc.clone()));
        }
    }
    Ok(node_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventClass::*, EventKind::*};
    use crate::qqtree::testutil::ev;
    use crate::qqtree::{build_qqtree, Activity};
    use proptest::prelude::*;

    pub(crate) fn running_example_tree() -> QQTree {
        let events = vec![
            ev("3", 0, Started, SqlBatch, "EXECUTE SyncNewSales 2"),
            ev("3", 1, Started, SpStatement, "IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') DELETE FROM TABLE StagedSales"),
            ev("3", 2, Completed, SpStatement, ""),
            ev("3", 3, Started, SpStatement, "BULK INSERT StagedSales FROM 'newSales.csv'"),
            ev("3", 4, Completed, SpStatement, ""),
            ev("3", 5, Started, SpStatement, "EXECUTE CleanAndAppendSalesHistory @trackingSystemVersion"),
            ev("3", 6, Started, SpStatement, "INSERT SalesHistory SELECT * FROM StagedSales"),
            ev("3", 7, Completed, SpStatement, ""),
            ev("3", 8, Completed, SpStatement, ""),
            ev("3", 9, Completed, SqlBatch, ""),
        ];
        let mut events = events;
        for e in &mut events {
            e.metadata.server_name = "srv".into();
            e.metadata.database_name = "db".into();
            e.metadata.username = "u".into();
        }
        build_qqtree(&Activity::new("3", events)).unwrap()
    }

    #[test]
    fn running_example_entities() {
        let t = running_example_tree();
        let r = extract_runtime(&t).unwrap();
        assert_eq!(r.node_map.len(), t.node_count());
        let g = &r.graph;
        let sync = g.by_name("q://db/dbo.SyncNewSales").unwrap();
        assert_eq!(sync.entity_type, EntityType::StoredProcedure);
        let sync_run = g.by_name("run://3/0").unwrap();
        assert_eq!(sync_run.entity_type, EntityType::StoredProcedureRun);
        assert!(g.has_rel(RelKind::RunOf, sync_run.guid, sync.guid));

        let exec_run = g.by_name("run://3/0.2").unwrap();
        assert_eq!(exec_run.entity_type, EntityType::SpStatementRun);
        assert!(g.has_rel(RelKind::SpawnedBy, exec_run.guid, sync_run.guid));
        let clean = g.by_name("q://db/dbo.CleanAndAppendSalesHistory").unwrap();
        let clean_run = g.by_name("run://3/0.2/exec").unwrap();
        assert!(g.has_rel(RelKind::RunOf, clean_run.guid, clean.guid));
        assert!(g.has_rel(RelKind::SpawnedBy, clean_run.guid, exec_run.guid));

        let insert_run = g.by_name("run://3/0.2.0").unwrap();
        assert!(g.has_rel(RelKind::SpawnedBy, insert_run.guid, clean_run.guid));
        let insert_static = g.entity(r.node_map["0.2.0"].static_guid).unwrap();
        assert!(insert_static.qualified_name.starts_with("q://db/dbo.CleanAndAppendSalesHistory/stmt-"));

        assert_eq!(insert_run.attr_int("cpu_time_us"), Some(5));
        assert_eq!(insert_run.attr_str("username"), Some("u"));
        let conns = g.entities().filter(|e| e.entity_type == EntityType::ClientConnection).count();
        assert_eq!(conns, 1);
        let runs = g.entities().filter(|e| e.entity_type.is_run()).count();
        let conn_edges = g.relationships().filter(|r| r.kind == RelKind::ConnectionOf).count();
        assert_eq!(runs, conn_edges);
        assert!(g.relationships().all(|r| r.kind != RelKind::Input && r.kind != RelKind::Output));
        g.validate().unwrap();
    }

    #[test]
    fn single_adhoc_statement() {
        let events = vec![ev("a", 0, Started, SqlStatement, "SELECT 1"), ev("a", 1, Completed, SqlStatement, "")];
        let t = build_qqtree(&Activity::new("a", events)).unwrap();
        let r = extract_runtime(&t).unwrap();
        let g = &r.graph;
        assert_eq!(g.entity_count(), 3);
        let kinds: Vec<_> = g.sorted_relationships().iter().map(|r| r.kind).collect();
        assert_eq!(kinds, [RelKind::RunOf, RelKind::ConnectionOf]);
    }

    #[test]
    fn second_activity_reuses_static() {
        let mk = |aid: &str| {
            let events = vec![ev(aid, 0, Started, SqlBatch, "EXEC dbo.P"), ev(aid, 1, Completed, SqlBatch, "")];
            extract_runtime(&build_qqtree(&Activity::new(aid, events)).unwrap()).unwrap()
        };
        let (a, b) = (mk("1"), mk("2"));
        assert_eq!(a.node_map["0"].static_guid, b.node_map["0"].static_guid);
        assert_ne!(a.node_map["0"].run_guid, b.node_map["0"].run_guid);
        let g = crate::graph::merge(&a.graph, &b.graph).unwrap();
        assert_eq!(g.entities().filter(|e| e.entity_type.is_run()).count(), 2);
    }

    #[test]
    fn dynamic_exec_is_not_expanded() {
        assert_eq!(exec_target("EXEC sp_executesql N'SELECT 1'"), None);
        assert_eq!(exec_target("EXECUTE Sales.Load 1, 2"), Some("Sales.Load".into()));
        assert_eq!(exec_target("SELECT 1"), None);
    }

    fn nested(depth: u32) -> impl Strategy<Value = Vec<(bool, EventClass)>> {
        // random well-nested sequence of Started(true)/Completed(false)
        let leaf = Just(vec![]).boxed();
        leaf.prop_recursive(depth, 64, 5, |inner| {
            prop::collection::vec(inner, 0..5).prop_map(|kids| kids.into_iter().flatten().collect::<Vec<_>>())
                .prop_map(|body: Vec<(bool, EventClass)>| {
                    let mut v = vec![(true, SqlStatement)];
                    v.extend(body);
                    v.push((false, SqlStatement));
                    v
                })
        })
    }

    proptest! {
        #[test]
        fn spawned_by_mirrors_tree(seq in nested(5)) {
            prop_assume!(!seq.is_empty());
            let events: Vec<_> = seq.iter().enumerate().map(|(i, (start, class))| {
                if *start { ev("r", i as u64, Started, *class, &format!("SELECT {i}")) } else { ev("r", i as u64, Completed, *class, "") }
            }).collect();
            let t = build_qqtree(&Activity::new("r", events)).unwrap();
            let r = extract_runtime(&t).unwrap();
            let n = t.node_count();
            prop_assert_eq!(r.node_map.len(), n);
            let spawned: Vec<_> = r.graph.relationships().filter(|x| x.kind == RelKind::SpawnedBy).collect();
            prop_assert_eq!(spawned.len(), n - 1);
            for node in t.preorder() {
                if let Some(p) = node.parent_id() {
                    prop_assert!(r.graph.has_rel(RelKind::SpawnedBy, r.node_map[&node.node_id].run_guid, r.node_map[p].run_guid));
                }
            }
        }
    }
}
