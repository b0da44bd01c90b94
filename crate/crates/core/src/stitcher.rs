//! Attaches statement lineage to run entities and aggregates it by set union.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::graph::{
    relation_of_column, union_mapping, ColumnMapping, EntityType, FastBuild, GraphError, Guid, ProvenanceGraph,
    RelKind,
};
use crate::provenance::StatementProvenance;
use crate::qqtree::{QQTree, QQTreeNode};
use crate::runtime::{NodeEntities, RuntimeExtract};

#[derive(Debug, Clone, Copy, Default)]
pub struct StitchOptions {
    /// Also materialize `Column` entities with `ColumnOf` edges for every
    /// mapped column. The mapping attribute is always written.
    pub emit_column_entities: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum StitchError {
    #[error("provenance for node {0} has no runtime entity")]
    MissingNode(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Lineage of one node after folding in its subtree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lineage {
    pub inputs: BTreeMap<String, EntityType>,
    pub outputs: BTreeMap<String, EntityType>,
    pub column_map: ColumnMapping,
}

impl Lineage {
    fn from_agg(a: &Agg<'_>) -> Lineage {
        Lineage {
            inputs: a.inputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            outputs: a.outputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            column_map: a
                .column_map
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }
}

/// Lineage borrowing names from the statement provenance.
#[derive(Default)]
struct Agg<'a> {
    inputs: BTreeMap<&'a str, EntityType>,
    outputs: BTreeMap<&'a str, EntityType>,
    column_map: BTreeMap<&'a str, BTreeSet<&'a str>>,
}

impl<'a> Agg<'a> {
    fn of(p: &'a StatementProvenance) -> Agg<'a> {
        Agg {
            inputs: p.inputs.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
            outputs: p.outputs.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
            column_map: p
                .column_map
                .iter()
                .map(|(k, v)| (k.as_str(), v.iter().map(String::as_str).collect()))
                .collect(),
        }
    }

    fn add(&mut self, other: &Agg<'a>) {
        for (k, v) in &other.inputs {
            self.inputs.entry(k).or_insert(*v);
        }
        for (k, v) in &other.outputs {
            self.outputs.entry(k).or_insert(*v);
        }
        for (k, v) in &other.column_map {
            self.column_map.entry(k).or_default().extend(v.iter().copied());
        }
    }
}

fn aggregate<'a>(
    t: &'a QQTree,
    p: &'a BTreeMap<String, StatementProvenance>,
) -> HashMap<&'a str, Agg<'a>, FastBuild> {
    fn go<'a>(
        n: &'a QQTreeNode,
        p: &'a BTreeMap<String, StatementProvenance>,
        out: &mut HashMap<&'a str, Agg<'a>, FastBuild>,
    ) {
        let mut l = p.get(&n.node_id).map(Agg::of).unwrap_or_default();
        for c in &n.children {
            go(c, p, out);
            l.add(&out[c.node_id.as_str()]);
        }
        out.insert(&n.node_id, l);
    }
    let mut out = HashMap::default();
    go(&t.root, p, &mut out);
    out
}

/// Own lineage unioned with every descendant's, keyed by node id.
pub fn aggregate_tree(t: &QQTree, p: &BTreeMap<String, StatementProvenance>) -> BTreeMap<String, Lineage> {
    aggregate(t, p).iter().map(|(k, a)| (k.to_string(), Lineage::from_agg(a))).collect()
}

fn dataset(g: &mut ProvenanceGraph, ty: EntityType, qn: &str) -> Result<Guid, GraphError> {
    match g.ensure(ty, qn) {
        Ok(id) => Ok(id),
        Err(e) => g.by_name(qn).map(|x| x.guid).ok_or(e),
    }
}

fn attach(g: &mut ProvenanceGraph, process: Guid, l: &Agg<'_>, datasets: &HashMap<&str, Guid, FastBuild>) {
    for qn in l.inputs.keys() {
        g.relate(RelKind::Input, datasets[qn], process);
    }
    for qn in l.outputs.keys() {
        g.relate(RelKind::Output, process, datasets[qn]);
    }
    if !l.column_map.is_empty() {
        let e = g.entity_mut(process).expect("process entity exists");
        let cm = e.column_mapping.get_or_insert_with(BTreeMap::new);
        for (o, ins) in &l.column_map {
            match cm.get_mut(*o) {
                Some(set) => {
                    for i in ins {
                        if !set.contains(*i) {
                            set.insert(i.to_string());
                        }
                    }
                }
                None => {
                    cm.insert(o.to_string(), ins.iter().map(|s| s.to_string()).collect());
                }
            }
        }
    }
}

pub fn stitch(
    r: &RuntimeExtract,
    p: &BTreeMap<String, StatementProvenance>,
    t: &QQTree,
) -> Result<ProvenanceGraph, StitchError> {
    stitch_with(r, p, t, &StitchOptions::default())
}

/// Unions runtime and lineage extracts. Every run, and the static query it
/// belongs to, receives the lineage of its whole subtree.
pub fn stitch_with(
    r: &RuntimeExtract,
    p: &BTreeMap<String, StatementProvenance>,
    t: &QQTree,
    opts: &StitchOptions,
) -> Result<ProvenanceGraph, StitchError> {
    stitch_into(r.graph.clone(), &r.node_map, p, t, opts)
}

/// [`stitch_with`] reusing the runtime graph instead of copying it.
pub fn stitch_owned(
    r: RuntimeExtract,
    p: &BTreeMap<String, StatementProvenance>,
    t: &QQTree,
    opts: &StitchOptions,
) -> Result<ProvenanceGraph, StitchError> {
    stitch_into(r.graph, &r.node_map, p, t, opts)
}

fn stitch_into(
    mut g: ProvenanceGraph,
    node_map: &BTreeMap<String, NodeEntities>,
    p: &BTreeMap<String, StatementProvenance>,
    t: &QQTree,
    opts: &StitchOptions,
) -> Result<ProvenanceGraph, StitchError> {
    stitch_onto(&mut g, node_map, p, t, opts)?;
    Ok(g)
}

/// Adds the lineage of one tree to a graph that already holds its runtime
/// entities, as produced by [`crate::runtime::extract_runtime_into`].
pub fn stitch_onto(
    g: &mut ProvenanceGraph,
    node_map: &BTreeMap<String, NodeEntities>,
    p: &BTreeMap<String, StatementProvenance>,
    t: &QQTree,
    opts: &StitchOptions,
) -> Result<(), StitchError> {
    if let Some(missing) = p.keys().find(|k| !node_map.contains_key(*k)) {
        return Err(StitchError::MissingNode(missing.clone()));
    }
    let agg = aggregate(t, p);
    let root = &agg[t.root.node_id.as_str()];

    // the root's lineage covers every relation mentioned anywhere below it
    let mut datasets: HashMap<&str, Guid, FastBuild> = HashMap::default();
    for (qn, ty) in root.inputs.iter().chain(&root.outputs) {
        if !datasets.contains_key(qn) {
            datasets.insert(qn, dataset(g, *ty, qn)?);
        }
    }
    for (node_id, l) in &agg {
        let Some(ents) = node_map.get(*node_id) else { continue };
        for proc in ents.processes() {
            attach(g, proc, l, &datasets);
        }
    }
    if opts.emit_column_entities {
        let cols: BTreeSet<&str> =
            root.column_map.iter().flat_map(|(o, ins)| std::iter::once(*o).chain(ins.iter().copied())).collect();
        emit_columns(g, cols)?;
    }
    Ok(())
}

fn emit_columns(g: &mut ProvenanceGraph, cols: BTreeSet<&str>) -> Result<(), GraphError> {
    for c in cols {
        if c.ends_with("#*") {
            continue;
        }
        let Some(rel) = g.by_name(relation_of_column(c)).map(|e| e.guid) else { continue };
        let col = dataset(g, EntityType::Column, c)?;
        g.relate(RelKind::ColumnOf, col, rel);
    }
    Ok(())
}

/// Edge index from process guid to the datasets it reads and writes.
fn io_index(g: &ProvenanceGraph) -> (HashMap<Guid, Vec<Guid>>, HashMap<Guid, Vec<Guid>>) {
    let mut ins: HashMap<Guid, Vec<Guid>> = HashMap::new();
    let mut outs: HashMap<Guid, Vec<Guid>> = HashMap::new();
    for r in g.relationships() {
        match r.kind {
            RelKind::Input => ins.entry(r.to).or_default().push(r.from),
            RelKind::Output => outs.entry(r.from).or_default().push(r.to),
            _ => {}
        }
    }
    (ins, outs)
}

/// Gives every static query the union of its runs' lineage.
pub fn aggregate_across_runs(mut g: ProvenanceGraph) -> ProvenanceGraph {
    let (ins, outs) = io_index(&g);
    let run_of: Vec<(Guid, Guid)> =
        g.relationships().filter(|r| r.kind == RelKind::RunOf).map(|r| (r.from, r.to)).collect();
    for (run, stat) in run_of {
        for d in ins.get(&run).into_iter().flatten() {
            g.relate(RelKind::Input, *d, stat);
        }
        for d in outs.get(&run).into_iter().flatten() {
            g.relate(RelKind::Output, stat, *d);
        }
        if let Some(cm) = g.entity(run).and_then(|e| e.column_mapping.clone()) {
            let e = g.entity_mut(stat).expect("RunOf target exists");
            union_mapping(e.column_mapping.get_or_insert_with(BTreeMap::new), &cm);
        }
    }
    g
}

/// Propagates column mappings up the `SpawnedBy` forest, deepest runs first,
/// then from runs to their static queries. Edges needed by the propagated
/// mappings are added alongside.
pub fn column_rollup(mut g: ProvenanceGraph) -> ProvenanceGraph {
    let mut parent: HashMap<Guid, Guid> = HashMap::new();
    let mut run_of: Vec<(Guid, Guid)> = Vec::new();
    for r in g.relationships() {
        match r.kind {
            RelKind::SpawnedBy => {
                parent.insert(r.from, r.to);
            }
            RelKind::RunOf => run_of.push((r.from, r.to)),
            _ => {}
        }
    }
    let mut depth: HashMap<Guid, usize> = HashMap::new();
    for &start in parent.keys() {
        let mut chain = vec![start];
        let mut cur = start;
        let base = loop {
            if let Some(d) = depth.get(&cur) {
                break *d;
            }
            match parent.get(&cur) {
                Some(p) if chain.len() <= parent.len() => {
                    cur = *p;
                    chain.push(cur);
                }
                _ => break 0,
            }
        };
        for (i, n) in chain.iter().rev().enumerate() {
            depth.entry(*n).or_insert(base + i);
        }
    }
    let mut children: Vec<Guid> = parent.keys().copied().collect();
    children.sort_by_key(|c| (std::cmp::Reverse(depth[c]), *c));
    for c in children {
        let p = parent[&c];
        copy_mapping(&mut g, c, p);
    }
    run_of.sort();
    for (run, stat) in run_of {
        copy_mapping(&mut g, run, stat);
    }
    g
}

fn copy_mapping(g: &mut ProvenanceGraph, from: Guid, to: Guid) {
    let Some(cm) = g.entity(from).and_then(|e| e.column_mapping.clone()) else { return };
    if cm.is_empty() {
        return;
    }
    for (out, ins) in &cm {
        if let Some(rel) = g.by_name(relation_of_column(out)).map(|e| e.guid) {
            g.relate(RelKind::Output, to, rel);
        }
        for i in ins {
            if let Some(rel) = g.by_name(relation_of_column(i)).map(|e| e.guid) {
                g.relate(RelKind::Input, rel, to);
            }
        }
    }
    let Some(e) = g.entity_mut(to) else { return };
    union_mapping(e.column_mapping.get_or_insert_with(BTreeMap::new), &cm);
}
