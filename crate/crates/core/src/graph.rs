//! Atlas-style provenance graph: typed entities, typed relationships and the
//! column-mapping dictionary carried by process entities.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::hash::{BuildHasherDefault, Hasher};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Guid(pub u128);

impl Guid {
    pub fn of(ty: EntityType, qualified_name: &str) -> Guid {
        let mut h = Sha256::new();
        h.update(ty.type_name().as_bytes());
        h.update([0u8]);
        h.update(qualified_name.as_bytes());
        let d = h.finalize();
        Guid(u128::from_be_bytes(d[..16].try_into().unwrap()))
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Guid({self})")
    }
}

impl Serialize for Guid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Guid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16).map(Guid).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Table,
    View,
    ExternalFile,
    Column,
    QueryOutput,
    StoredProcedure,
    StoredProcedureRun,
    Batch,
    BatchRun,
    AdhocStatement,
    AdhocStatementRun,
    SpStatement,
    SpStatementRun,
    ClientConnection,
}

impl EntityType {
    pub const ALL: [EntityType; 14] = [
        EntityType::Table,
        EntityType::View,
        EntityType::ExternalFile,
        EntityType::Column,
        EntityType::QueryOutput,
        EntityType::StoredProcedure,
        EntityType::StoredProcedureRun,
        EntityType::Batch,
        EntityType::BatchRun,
        EntityType::AdhocStatement,
        EntityType::AdhocStatementRun,
        EntityType::SpStatement,
        EntityType::SpStatementRun,
        EntityType::ClientConnection,
    ];

    pub fn type_name(self) -> &'static str {
        use EntityType::*;
        match self {
            Table => "table",
            View => "view",
            ExternalFile => "external_file",
            Column => "column",
            QueryOutput => "query_output",
            StoredProcedure => "stored_procedure",
            StoredProcedureRun => "stored_procedure_run",
            Batch => "batch",
            BatchRun => "batch_run",
            AdhocStatement => "adhoc_statement",
            AdhocStatementRun => "adhoc_statement_run",
            SpStatement => "sp_statement",
            SpStatementRun => "sp_statement_run",
            ClientConnection => "client_connection",
        }
    }

    /// Relations: the things Input/Output edges and columns attach to.
    pub fn is_relation(self) -> bool {
        matches!(self, EntityType::Table | EntityType::View | EntityType::ExternalFile | EntityType::QueryOutput)
    }

    pub fn is_dataset(self) -> bool {
        self.is_relation() || self == EntityType::Column
    }

    pub fn is_run(self) -> bool {
        self.static_of().is_some()
    }

    pub fn is_static_query(self) -> bool {
        self.run_of().is_some()
    }

    pub fn is_process(self) -> bool {
        self.is_run() || self.is_static_query()
    }

    /// The static counterpart of a run type.
    pub fn static_of(self) -> Option<EntityType> {
        use EntityType::*;
        match self {
            StoredProcedureRun => Some(StoredProcedure),
            BatchRun => Some(Batch),
            AdhocStatementRun => Some(AdhocStatement),
            SpStatementRun => Some(SpStatement),
            _ => None,
        }
    }

    pub fn run_of(self) -> Option<EntityType> {
        use EntityType::*;
        match self {
            StoredProcedure => Some(StoredProcedureRun),
            Batch => Some(BatchRun),
            AdhocStatement => Some(AdhocStatementRun),
            SpStatement => Some(SpStatementRun),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Str(String),
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::Str(s.to_string())
    }
}

impl From<String> for AttrValue {
    fn from(s: String) -> Self {
        AttrValue::Str(s)
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

/// Output column qualified name -> input column qualified names.
pub type ColumnMapping = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub guid: Guid,
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub qualified_name: String,
    pub attributes: BTreeMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_mapping: Option<ColumnMapping>,
    /// Run timestamp of the newest contribution; drives attribute conflicts.
    #[serde(default)]
    pub updated_at: i64,
}

impl Entity {
    pub fn new(entity_type: EntityType, qualified_name: impl Into<String>) -> Self {
        let qualified_name = qualified_name.into();
        Entity {
            guid: Guid::of(entity_type, &qualified_name),
            entity_type,
            qualified_name,
            attributes: BTreeMap::new(),
            column_mapping: None,
            updated_at: 0,
        }
    }

    pub fn with_attr(mut self, key: &str, v: impl Into<AttrValue>) -> Self {
        self.attributes.insert(key.to_string(), v.into());
        self
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attributes.get(key) {
            Some(AttrValue::Str(s)) => Some(s),
            _ => None,
        }
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attributes.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    /// Folds `other` (same guid) into `self`. Commutative and idempotent:
    /// per attribute the newer contribution wins, ties keep the larger value;
    /// column mappings are unioned.
    fn absorb(&mut self, other: &Entity) {
        for (k, v) in &other.attributes {
            match self.attributes.get_mut(k) {
                None => {
                    self.attributes.insert(k.clone(), v.clone());
                }
                Some(mine) => {
                    let take = match other.updated_at.cmp(&self.updated_at) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Less => false,
                        std::cmp::Ordering::Equal => *v > *mine,
                    };
                    if take {
                        *mine = v.clone();
                    }
                }
            }
        }
        if let Some(cm) = &other.column_mapping {
            union_mapping(self.column_mapping.get_or_insert_with(BTreeMap::new), cm);
        }
        self.updated_at = self.updated_at.max(other.updated_at);
    }
}

pub fn union_mapping(into: &mut ColumnMapping, from: &ColumnMapping) {
    for (out, ins) in from {
        match into.get_mut(out) {
            Some(set) => {
                for i in ins {
                    if !set.contains(i) {
                        set.insert(i.clone());
                    }
                }
            }
            None => {
                into.insert(out.clone(), ins.clone());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelKind {
    /// dataset -> process
    Input,
    /// process -> dataset
    Output,
    /// run -> static query
    RunOf,
    /// child run -> parent run
    SpawnedBy,
    /// run -> client connection
    ConnectionOf,
    /// column -> relation
    ColumnOf,
}

impl RelKind {
    pub const ALL: [RelKind; 6] =
        [RelKind::Input, RelKind::Output, RelKind::RunOf, RelKind::SpawnedBy, RelKind::ConnectionOf, RelKind::ColumnOf];

    pub fn name(self) -> &'static str {
        match self {
            RelKind::Input => "input",
            RelKind::Output => "output",
            RelKind::RunOf => "run_of",
            RelKind::SpawnedBy => "spawned_by",
            RelKind::ConnectionOf => "connection_of",
            RelKind::ColumnOf => "column_of",
        }
    }

    fn endpoints_ok(self, from: EntityType, to: EntityType) -> bool {
        match self {
            RelKind::Input => from.is_relation() && to.is_process(),
            RelKind::Output => from.is_process() && to.is_relation(),
            RelKind::RunOf => from.static_of() == Some(to),
            RelKind::SpawnedBy => from.is_run() && to.is_run(),
            RelKind::ConnectionOf => from.is_run() && to == EntityType::ClientConnection,
            RelKind::ColumnOf => from == EntityType::Column && to.is_relation(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relationship {
    pub kind: RelKind,
    pub from: Guid,
    pub to: Guid,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("qualified name {name} used as both {first} and {second}")]
    TypeConflict { name: String, first: &'static str, second: &'static str },
    #[error("graph validation failed: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Multiplicative hasher; guids are digests already, so little mixing is needed.
#[derive(Default, Clone, Copy)]
pub struct FastHasher(u64);

impl FastHasher {
    #[inline]
    fn add(&mut self, w: u64) {
        self.0 = (self.0.rotate_left(5) ^ w).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
}

impl Hasher for FastHasher {
    fn write(&mut self, bytes: &[u8]) {
        let mut chunks = bytes.chunks_exact(8);
        for c in &mut chunks {
            self.add(u64::from_le_bytes(c.try_into().unwrap()));
        }
        let mut tail = [0u8; 8];
        let rest = chunks.remainder();
        tail[..rest.len()].copy_from_slice(rest);
        self.add(u64::from_le_bytes(tail) ^ (rest.len() as u64) << 59);
    }

    fn write_u8(&mut self, i: u8) {
        self.add(u64::from(i));
    }

    fn write_u32(&mut self, i: u32) {
        self.add(u64::from(i));
    }

    fn write_u64(&mut self, i: u64) {
        self.add(i);
    }

    fn write_u128(&mut self, i: u128) {
        self.add(i as u64);
        self.add((i >> 64) as u64);
    }

    fn write_usize(&mut self, i: usize) {
        self.add(i as u64);
    }

    fn write_isize(&mut self, i: isize) {
        self.add(i as u64);
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

pub type FastBuild = BuildHasherDefault<FastHasher>;

#[derive(Debug, Clone, Default)]
pub struct ProvenanceGraph {
    entities: HashMap<Guid, Entity, FastBuild>,
    relationships: HashSet<Relationship, FastBuild>,
    names: HashMap<String, Guid, FastBuild>,
}

impl PartialEq for ProvenanceGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities && self.relationships == other.relationships
    }
}

impl ProvenanceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// `|V| + |E|`.
    pub fn size(&self) -> usize {
        self.entities.len() + self.relationships.len()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relationship_count(&self) -> usize {
        self.relationships.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relationships.is_empty()
    }

    pub fn entity(&self, g: Guid) -> Option<&Entity> {
        self.entities.get(&g)
    }

    pub fn entity_mut(&mut self, g: Guid) -> Option<&mut Entity> {
        self.entities.get_mut(&g)
    }

    pub fn by_name(&self, qualified_name: &str) -> Option<&Entity> {
        self.names.get(qualified_name).and_then(|g| self.entities.get(g))
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relationships(&self) -> impl Iterator<Item = &Relationship> {
        self.relationships.iter()
    }

    pub fn has_rel(&self, kind: RelKind, from: Guid, to: Guid) -> bool {
        self.relationships.contains(&Relationship { kind, from, to })
    }

    /// Entities sorted by qualified name.
    pub fn sorted_entities(&self) -> Vec<&Entity> {
        let mut v: Vec<&Entity> = self.entities.values().collect();
        v.sort_by(|a, b| a.qualified_name.cmp(&b.qualified_name).then(a.entity_type.cmp(&b.entity_type)));
        v
    }

    /// Relationships sorted by (kind, from name, to name).
    pub fn sorted_relationships(&self) -> Vec<&Relationship> {
        let name = |g: &Guid| self.entities.get(g).map_or("", |e| e.qualified_name.as_str());
        let mut v: Vec<&Relationship> = self.relationships.iter().collect();
        v.sort_by(|a, b| {
            a.kind.cmp(&b.kind).then_with(|| name(&a.from).cmp(name(&b.from))).then_with(|| name(&a.to).cmp(name(&b.to)))
        });
        v
    }

    /// Inserts or merges an entity. The same qualified name may not carry two
    /// entity types.
    pub fn upsert(&mut self, e: Entity) -> Result<Guid, GraphError> {
        let g = e.guid;
        match self.names.get(&e.qualified_name) {
            Some(existing) if *existing != g => {
                let first = self.entities[existing].entity_type.type_name();
                return Err(GraphError::TypeConflict {
                    name: e.qualified_name,
                    first,
                    second: e.entity_type.type_name(),
                });
            }
            Some(_) => {
                self.entities.get_mut(&g).unwrap().absorb(&e);
            }
            None => {
                self.names.insert(e.qualified_name.clone(), g);
                self.entities.insert(g, e);
            }
        }
        Ok(g)
    }

    /// Ensures a bare entity exists and returns its guid.
    pub fn ensure(&mut self, ty: EntityType, qualified_name: &str) -> Result<Guid, GraphError> {
        match self.names.get(qualified_name) {
            Some(g) if self.entities[g].entity_type == ty => Ok(*g),
            _ => self.upsert(Entity::new(ty, qualified_name)),
        }
    }

    /// Adds an edge; returns false when it already existed.
    pub fn relate(&mut self, kind: RelKind, from: Guid, to: Guid) -> bool {
        self.relationships.insert(Relationship { kind, from, to })
    }

    pub fn remove_relationship(&mut self, r: &Relationship) -> bool {
        self.relationships.remove(r)
    }

    /// Removes the given entities along with every incident relationship.
    pub fn remove_entities(&mut self, doomed: &HashSet<Guid>) {
        for g in doomed {
            if let Some(e) = self.entities.remove(g) {
                self.names.remove(&e.qualified_name);
            }
        }
        self.relationships.retain(|r| !doomed.contains(&r.from) && !doomed.contains(&r.to));
    }

    pub fn retain_relationships(&mut self, keep: impl FnMut(&Relationship) -> bool) {
        self.relationships.retain(keep);
    }

    /// Targets of edges `kind` leaving `from`.
    pub fn out_of(&self, kind: RelKind, from: Guid) -> BTreeSet<Guid> {
        self.relationships.iter().filter(|r| r.kind == kind && r.from == from).map(|r| r.to).collect()
    }

    /// Sources of edges `kind` arriving at `to`.
    pub fn into_of(&self, kind: RelKind, to: Guid) -> BTreeSet<Guid> {
        self.relationships.iter().filter(|r| r.kind == kind && r.to == to).map(|r| r.from).collect()
    }

    /// Qualified names of the relations feeding a process.
    pub fn input_names(&self, process: Guid) -> BTreeSet<String> {
        self.into_of(RelKind::Input, process).iter().map(|g| self.entities[g].qualified_name.clone()).collect()
    }

    pub fn output_names(&self, process: Guid) -> BTreeSet<String> {
        self.out_of(RelKind::Output, process).iter().map(|g| self.entities[g].qualified_name.clone()).collect()
    }

    /// In-place union with `other`.
    pub fn absorb(&mut self, other: &ProvenanceGraph) -> Result<(), GraphError> {
        for e in other.entities.values() {
            self.upsert(e.clone())?;
        }
        self.relationships.extend(other.relationships.iter().copied());
        Ok(())
    }

    /// [`ProvenanceGraph::absorb`] taking ownership of `other`.
    pub fn merge(&mut self, other: ProvenanceGraph) -> Result<(), GraphError> {
        if self.entities.is_empty() && self.relationships.is_empty() {
            *self = other;
            return Ok(());
        }
        for e in other.entities.into_values() {
            self.upsert(e)?;
        }
        self.relationships.extend(other.relationships);
        Ok(())
    }

    /// Checks referential integrity, endpoint typing, mapping placement and
    /// the mapping/edge closure.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut problems = Vec::new();
        for r in &self.relationships {
            let (Some(f), Some(t)) = (self.entities.get(&r.from), self.entities.get(&r.to)) else {
                problems.push(format!("{} edge {} -> {} has a dangling endpoint", r.kind.name(), r.from, r.to));
                continue;
            };
            if !r.kind.endpoints_ok(f.entity_type, t.entity_type) {
                problems.push(format!(
                    "{} edge cannot link {} to {}",
                    r.kind.name(),
                    f.entity_type.type_name(),
                    t.entity_type.type_name()
                ));
            }
        }
        for e in self.entities.values() {
            let Some(cm) = &e.column_mapping else { continue };
            if !e.entity_type.is_process() {
                problems.push(format!("{} carries a column mapping but is not a process", e.qualified_name));
                continue;
            }
            for (out, ins) in cm {
                if !self.relation_edge(RelKind::Output, e.guid, out) {
                    problems.push(format!("{}: mapped output {out} lacks an output edge", e.qualified_name));
                }
                for i in ins {
                    if !self.relation_edge(RelKind::Input, e.guid, i) {
                        problems.push(format!("{}: mapped input {i} lacks an input edge", e.qualified_name));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            problems.sort();
            Err(GraphError::Invalid(problems))
        }
    }

    fn relation_edge(&self, kind: RelKind, process: Guid, column_qn: &str) -> bool {
        let Some(rel) = self.names.get(relation_of_column(column_qn)) else { return false };
        match kind {
            RelKind::Input => self.has_rel(RelKind::Input, *rel, process),
            _ => self.has_rel(RelKind::Output, process, *rel),
        }
    }
}

/// Set union of two graphs.
pub fn merge(g1: &ProvenanceGraph, g2: &ProvenanceGraph) -> Result<ProvenanceGraph, GraphError> {
    let mut out = g1.clone();
    out.absorb(g2)?;
    Ok(out)
}

/// Relation part of a column qualified name (`ds://.../T#col` -> `ds://.../T`).
pub fn relation_of_column(column_qn: &str) -> &str {
    column_qn.rsplit_once('#').map_or(column_qn, |(r, _)| r)
}

pub mod names {
    //! Qualified-name scheme.

    pub fn dataset(server: &str, db: &str, schema: &str, object: &str, generation: u32) -> String {
        if generation > 1 {
            format!("ds://{server}/{db}/{schema}/{object}@{generation}")
        } else {
            format!("ds://{server}/{db}/{schema}/{object}")
        }
    }

    pub fn column(relation_qn: &str, column: &str) -> String {
        format!("{relation_qn}#{column}")
    }

    pub fn file(path: &str) -> String {
        format!("file://{path}")
    }

    pub fn static_query(db: &str, identity: &str) -> String {
        format!("q://{db}/{identity}")
    }

    pub fn run(activity_id: &str, node_id: &str) -> String {
        format!("run://{activity_id}/{node_id}")
    }

    pub fn connection(server: &str, client_host: &str, client_app: &str, username: &str) -> String {
        format!("conn://{server}/{client_host}/{client_app}/{username}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ProvenanceGraph {
        let mut g = ProvenanceGraph::new();
        let t = g.ensure(EntityType::Table, "ds://s/d/dbo/T").unwrap();
        let u = g.ensure(EntityType::Table, "ds://s/d/dbo/U").unwrap();
        let q = g.ensure(EntityType::AdhocStatement, "q://d/stmt-1").unwrap();
        let r = g.upsert(Entity::new(EntityType::AdhocStatementRun, "run://1/0").with_attr("cpu_time_us", 4)).unwrap();
        g.relate(RelKind::Input, t, r);
        g.relate(RelKind::Output, r, u);
        g.relate(RelKind::RunOf, r, q);
        g
    }

    #[test]
    fn qualified_names() {
        assert_eq!(names::dataset("srv", "db", "dbo", "SalesHistory", 1), "ds://srv/db/dbo/SalesHistory");
        assert_eq!(names::dataset("srv", "db", "dbo", "T", 2), "ds://srv/db/dbo/T@2");
        assert_eq!(names::run("3", "0"), "run://3/0");
        assert_eq!(names::column("ds://s/d/dbo/T", "a"), "ds://s/d/dbo/T#a");
        assert_eq!(relation_of_column("ds://s/d/dbo/T#a"), "ds://s/d/dbo/T");
    }

    #[test]
    fn guid_is_deterministic_and_typed() {
        let a = Guid::of(EntityType::StoredProcedureRun, "run://3/0");
        assert_eq!(a, Guid::of(EntityType::StoredProcedureRun, "run://3/0"));
        assert_ne!(a, Guid::of(EntityType::BatchRun, "run://3/0"));
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s.len(), 34);
        assert_eq!(serde_json::from_str::<Guid>(&s).unwrap(), a);
    }

    #[test]
    fn merge_identity_and_idempotence() {
        let g = sample();
        assert_eq!(merge(&g, &ProvenanceGraph::new()).unwrap(), g);
        assert_eq!(merge(&g, &g).unwrap(), g);
        g.validate().unwrap();
    }

    #[test]
    fn type_conflict() {
        let mut g = sample();
        let err = g.upsert(Entity::new(EntityType::View, "ds://s/d/dbo/T")).unwrap_err();
        assert!(matches!(err, GraphError::TypeConflict { first: "table", second: "view", .. }));
    }

    #[test]
    fn newer_attributes_win() {
        let mut g = ProvenanceGraph::new();
        let mut old = Entity::new(EntityType::AdhocStatement, "q://d/x").with_attr("username", "a");
        old.updated_at = 1;
        let mut new = Entity::new(EntityType::AdhocStatement, "q://d/x").with_attr("username", "b");
        new.updated_at = 2;
        g.upsert(new.clone()).unwrap();
        g.upsert(old.clone()).unwrap();
        assert_eq!(g.by_name("q://d/x").unwrap().attr_str("username"), Some("b"));
    }

    #[test]
    fn validate_reports_problems() {
        let mut g = sample();
        let t = g.by_name("ds://s/d/dbo/T").unwrap().guid;
        let u = g.by_name("ds://s/d/dbo/U").unwrap().guid;
        g.relate(RelKind::RunOf, t, u);
        g.relate(RelKind::Input, Guid(7), t);
        let run = g.by_name("run://1/0").unwrap().guid;
        let mut cm = ColumnMapping::new();
        cm.insert("ds://s/d/dbo/U#a".into(), BTreeSet::from(["ds://s/d/dbo/V#a".to_string()]));
        g.entity_mut(run).unwrap().column_mapping = Some(cm);
        let GraphError::Invalid(p) = g.validate().unwrap_err() else { panic!() };
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn remove_drops_incident_edges() {
        let mut g = sample();
        let r = g.by_name("run://1/0").unwrap().guid;
        g.remove_entities(&HashSet::from([r]));
        assert_eq!(g.relationship_count(), 0);
        assert!(g.by_name("run://1/0").is_none());
        g.validate().unwrap();
    }

    fn arb_graph() -> impl Strategy<Value = ProvenanceGraph> {
        let ent = (0usize..6, 0u8..4, 0i64..3, 0i64..3);
        prop::collection::vec(ent, 0..12).prop_map(|items| {
            let mut g = ProvenanceGraph::new();
            let mut prev: Option<Guid> = None;
            for (name, val, stamp, cpu) in items {
                let mut e = Entity::new(EntityType::AdhocStatementRun, format!("run://a/{name}"))
                    .with_attr("v", format!("{val}"))
                    .with_attr("cpu_time_us", cpu);
                e.updated_at = stamp;
                let gid = g.upsert(e).unwrap();
                if let Some(p) = prev {
                    g.relate(RelKind::SpawnedBy, gid, p);
                }
                prev = Some(gid);
            }
            g
        })
    }

    proptest! {
        #[test]
        fn merge_is_commutative_and_idempotent(a in arb_graph(), b in arb_graph()) {
            let ab = merge(&a, &b).unwrap();
            prop_assert_eq!(&ab, &merge(&b, &a).unwrap());
            prop_assert_eq!(&merge(&ab, &ab).unwrap(), &ab);
            prop_assert_eq!(&merge(&ab, &a).unwrap(), &ab);
        }
    }
}
