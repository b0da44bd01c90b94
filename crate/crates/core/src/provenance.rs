//! Statement-level lineage: script generation, catalog replay and static
//! analysis of each statement into input/output relations and column maps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{split_name, CatalogState, Column, ObjectKind};
use crate::event::EventClass;
use crate::graph::{names, relation_of_column, ColumnMapping, EntityType};
use crate::qqtree::{QQTree, Routing};
use crate::sql::ast::*;
use crate::sql::{self, parse_script};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingMode {
    /// Bindings annotated on the event, then catalog state, then best effort.
    PreBound,
    /// Catalog state, then best effort.
    #[default]
    StateBased,
    /// Syntax only.
    BestEffort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    #[default]
    Exact,
    Suggested,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatementProvenance {
    pub node_id: String,
    /// Relation qualified name to entity type.
    pub inputs: BTreeMap<String, EntityType>,
    pub outputs: BTreeMap<String, EntityType>,
    /// Output column to the input columns it derives from. `rel#*` stands for
    /// every column of `rel`.
    pub column_map: ColumnMapping,
    pub confidence: Confidence,
    pub diagnostics: Vec<String>,
}

impl StatementProvenance {
    pub fn empty(node_id: impl Into<String>) -> Self {
        StatementProvenance { node_id: node_id.into(), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty() && self.outputs.is_empty() && self.column_map.is_empty()
    }

    pub fn absorb(&mut self, other: StatementProvenance) {
        self.inputs.extend(other.inputs);
        self.outputs.extend(other.outputs);
        crate::graph::union_mapping(&mut self.column_map, &other.column_map);
        self.confidence = self.confidence.max(other.confidence);
        self.diagnostics.extend(other.diagnostics);
    }

    pub fn input_names(&self) -> BTreeSet<&str> {
        self.inputs.keys().map(String::as_str).collect()
    }

    pub fn output_names(&self) -> BTreeSet<&str> {
        self.outputs.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceOptions {
    pub mode: BindingMode,
    pub include_control_columns: bool,
    pub max_expansion_depth: usize,
}

impl Default for ProvenanceOptions {
    fn default() -> Self {
        ProvenanceOptions { mode: BindingMode::StateBased, include_control_columns: false, max_expansion_depth: 16 }
    }
}

/// A binding annotation: the columns and generation an object name had when
/// the statement ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundObject {
    pub columns: Vec<String>,
    #[serde(default = "first_generation")]
    pub generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ObjectKind>,
}

fn first_generation() -> u32 {
    1
}

/// Object name as written (`T`, `dbo.T`) to its binding.
pub type Bindings = BTreeMap<String, BoundObject>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptStatement {
    pub node_id: String,
    pub text: String,
    /// Byte range of `text` in the concatenated script.
    pub span: (usize, usize),
    pub class: EventClass,
    pub has_children: bool,
    pub routing: Routing,
    pub bindings: Option<Bindings>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SqlScript {
    pub text: String,
    pub statements: Vec<ScriptStatement>,
}

/// Concatenates node texts in DFS pre-order, one per line.
pub fn generate_script(t: &QQTree) -> SqlScript {
    let mut script = SqlScript::default();
    for node in t.preorder() {
        let text = node.text();
        if text.is_empty() {
            continue;
        }
        if !script.text.is_empty() {
            script.text.push('\n');
        }
        let start = script.text.len();
        script.text.push_str(text);
        let bindings = node.started.extras.get("bindings").and_then(|v| serde_json::from_value(v.clone()).ok());
        script.statements.push(ScriptStatement {
            node_id: node.node_id.clone(),
            text: text.to_string(),
            span: (start, script.text.len()),
            class: node.class(),
            has_children: !node.children.is_empty(),
            routing: node.routing,
            bindings,
        });
    }
    script
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProvenanceError {
    #[error("unsupported syntax: {0}")]
    UnsupportedSyntax(String),
}

/// Replays the DDL in `stmt` over a copy of `c`. Statements that do not parse
/// leave the state unchanged and are reported.
pub fn apply_ddl(c: &CatalogState, stmt: &str) -> Result<CatalogState, ProvenanceError> {
    let parsed = parse_script(stmt).map_err(|e| ProvenanceError::UnsupportedSyntax(e.to_string()))?;
    if let Some(Err(e)) = parsed.iter().map(|p| p.result.as_ref()).find(|r| r.is_err()) {
        return Err(ProvenanceError::UnsupportedSyntax(e.to_string()));
    }
    let mut next = c.clone();
    let opts = ProvenanceOptions::default();
    for p in parsed {
        let text = &stmt[p.span.0..p.span.1];
        fold(p.result.as_ref().unwrap(), text, &mut next, None, &opts, &mut StatementProvenance::default());
    }
    Ok(next)
}

/// Analyzes one statement text against `c` without changing it. Multi-statement
/// texts are folded in order over a scratch copy of the catalog.
pub fn analyze_statement(stmt: &str, c: &CatalogState, opts: &ProvenanceOptions) -> StatementProvenance {
    let mut scratch = c.clone();
    analyze_text("", stmt, &mut scratch, None, opts)
}

/// Folds DDL replay and analysis over the script in order. Batches whose
/// statements arrive as child nodes and runtime-only nodes are not analyzed.
pub fn extract_provenance(
    s: &SqlScript,
    c: &mut CatalogState,
    opts: &ProvenanceOptions,
) -> BTreeMap<String, StatementProvenance> {
    let mut out = BTreeMap::new();
    for st in &s.statements {
        if st.routing == Routing::RuntimeOnly || (st.has_children && st.class == EventClass::SqlBatch) {
            continue;
        }
        let bindings = if opts.mode == BindingMode::PreBound { st.bindings.as_ref() } else { None };
        out.insert(st.node_id.clone(), analyze_text(&st.node_id, &st.text, c, bindings, opts));
    }
    out
}

/// Analyzes every statement of `text`, replaying its DDL into `c` as it goes.
pub fn analyze_text(
    node_id: &str,
    text: &str,
    c: &mut CatalogState,
    bindings: Option<&Bindings>,
    opts: &ProvenanceOptions,
) -> StatementProvenance {
    let mut acc = StatementProvenance::empty(node_id);
    let parsed = match parse_script(text) {
        Ok(p) => p,
        Err(e) => {
            acc.confidence = Confidence::Suggested;
            acc.diagnostics.push(format!("unsupported syntax: {e}"));
            return acc;
        }
    };
    for p in parsed {
        match &p.result {
            Ok(stmt) => fold(stmt, &text[p.span.0..p.span.1], c, bindings, opts, &mut acc),
            Err(e) => {
                acc.confidence = Confidence::Suggested;
                acc.diagnostics.push(format!("unsupported syntax: {e}"));
            }
        }
    }
    acc
}

/// Analyzes `stmt`, merges the result into `acc`, then applies its catalog
/// effects. Control-flow wrappers are unwrapped; their conditions are ignored.
fn fold(
    stmt: &Statement,
    text: &str,
    c: &mut CatalogState,
    bindings: Option<&Bindings>,
    opts: &ProvenanceOptions,
    acc: &mut StatementProvenance,
) {
    match stmt {
        Statement::If { then, otherwise } => {
            for s in then.iter().chain(otherwise) {
                fold(s, text, c, bindings, opts, acc);
            }
            if !otherwise.is_empty() {
                // both branches are reported; only one ran
                acc.confidence = Confidence::Suggested;
            }
        }
        Statement::While { body } | Statement::Block(body) => {
            for s in body {
                fold(s, text, c, bindings, opts, acc);
            }
        }
        _ => {
            let mut ctx = Ctx::new(c, bindings, opts);
            let effect = ctx.statement(stmt, text);
            let p = ctx.finish();
            acc.absorb(p);
            apply_effect(stmt, effect, c);
        }
    }
}

/// Catalog change computed during analysis (column lists of derived objects).
enum Effect {
    None,
    Columns(Vec<String>),
}

fn apply_effect(stmt: &Statement, effect: Effect, c: &mut CatalogState) {
    let derived = match effect {
        Effect::Columns(cols) => cols,
        Effect::None => Vec::new(),
    };
    let untyped = |names: Vec<String>| names.into_iter().map(|n| Column::new(n, "")).collect::<Vec<_>>();
    match stmt {
        Statement::CreateTable { name, columns } => {
            let cols = columns.iter().map(|d| Column::new(&d.name, &d.data_type)).collect();
            c.create(ObjectKind::Table, name, cols, None);
        }
        Statement::Query(q) => {
            if let Some(into) = &q.body.into {
                if !into.name().starts_with('@') {
                    c.create(ObjectKind::Table, into, untyped(derived), None);
                }
            }
        }
        Statement::CreateView { name, text, or_alter, .. } => {
            if *or_alter {
                c.replace_definition(ObjectKind::View, name, untyped(derived), Some(text.clone()));
            } else {
                c.create(ObjectKind::View, name, untyped(derived), Some(text.clone()));
            }
        }
        Statement::CreateProcedure { name, text, or_alter } => {
            if *or_alter {
                c.replace_definition(ObjectKind::Procedure, name, Vec::new(), Some(text.clone()));
            } else {
                c.create(ObjectKind::Procedure, name, Vec::new(), Some(text.clone()));
            }
        }
        Statement::AlterTableAdd { name, columns } => {
            if let Some(obj) = c.get_mut(name) {
                for d in columns {
                    if obj.column(&d.name).is_none() {
                        obj.columns.push(Column::new(&d.name, &d.data_type));
                    }
                }
            }
        }
        Statement::AlterTableDropColumn { name, columns } => {
            if let Some(obj) = c.get_mut(name) {
                obj.columns.retain(|col| !columns.iter().any(|d| d.eq_ignore_ascii_case(&col.name)));
            }
        }
        Statement::Drop { names, .. } => {
            for n in names {
                c.drop_object(n);
            }
        }
        _ => {}
    }
}

// ---- analysis --------------------------------------------------------------

#[derive(Debug, Clone)]
struct OutCol {
    name: Option<String>,
    lineage: BTreeSet<String>,
    /// Stands for an unexpandable `*`.
    star: bool,
}

#[derive(Debug, Clone, Default)]
struct QueryResult {
    cols: Vec<OutCol>,
    control: BTreeSet<String>,
    /// Every select item assigns a variable; no result set.
    assigns_only: bool,
}

#[derive(Debug, Clone)]
struct Source {
    alias: Option<String>,
    table_name: Option<String>,
    relation: Option<String>,
    /// `None` when the schema is unknown.
    columns: Option<Vec<OutCol>>,
}

impl Source {
    fn matches(&self, qualifier: &str) -> bool {
        match &self.alias {
            Some(a) => a.eq_ignore_ascii_case(qualifier),
            None => self.table_name.as_deref().is_some_and(|t| t.eq_ignore_ascii_case(qualifier)),
        }
    }
}

struct Bound {
    qn: String,
    kind: ObjectKind,
    columns: Vec<String>,
    definition: Option<String>,
}

struct Ctx<'a> {
    catalog: &'a CatalogState,
    bindings: Option<&'a Bindings>,
    opts: &'a ProvenanceOptions,
    inputs: BTreeMap<String, EntityType>,
    outputs: BTreeMap<String, EntityType>,
    column_map: ColumnMapping,
    suggested: bool,
    diags: Vec<String>,
    scopes: Vec<Vec<Source>>,
    ctes: Vec<(String, Option<Vec<OutCol>>)>,
    depth: usize,
}

fn is_system(name: &ObjectName) -> bool {
    let schema = name.schema().unwrap_or("");
    schema.eq_ignore_ascii_case("sys")
        || schema.eq_ignore_ascii_case("information_schema")
        || name.name().to_ascii_lowercase().starts_with("sys") && name.schema().is_none()
}

fn kind_type(k: ObjectKind) -> EntityType {
    match k {
        ObjectKind::View => EntityType::View,
        ObjectKind::External => EntityType::ExternalFile,
        ObjectKind::Table | ObjectKind::Procedure => EntityType::Table,
    }
}

fn star_of(rel: &str) -> String {
    names::column(rel, "*")
}

impl<'a> Ctx<'a> {
    fn new(catalog: &'a CatalogState, bindings: Option<&'a Bindings>, opts: &'a ProvenanceOptions) -> Self {
        Ctx {
            catalog,
            bindings,
            opts,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            column_map: ColumnMapping::new(),
            suggested: false,
            diags: Vec::new(),
            scopes: Vec::new(),
            ctes: Vec::new(),
            depth: 0,
        }
    }

    fn suggest(&mut self, why: impl Into<String>) {
        self.suggested = true;
        let why = why.into();
        if !self.diags.contains(&why) {
            self.diags.push(why);
        }
    }

    fn finish(mut self) -> StatementProvenance {
        // every mapped input column's relation is an input
        let sources: Vec<String> =
            self.column_map.values().flatten().map(|c| relation_of_column(c).to_string()).collect();
        for rel in sources {
            if !self.inputs.contains_key(&rel) {
                let ty = self.outputs.get(&rel).copied().unwrap_or(EntityType::Table);
                self.inputs.insert(rel, ty);
            }
        }
        self.column_map.retain(|_, v| !v.is_empty());
        StatementProvenance {
            node_id: String::new(),
            inputs: self.inputs,
            outputs: self.outputs,
            column_map: self.column_map,
            confidence: if self.suggested { Confidence::Suggested } else { Confidence::Exact },
            diagnostics: self.diags,
        }
    }

    fn lookup(&self, name: &ObjectName) -> Option<Bound> {
        if let Some(b) = self.bindings {
            let (schema, object) = split_name(name);
            let hit = b.iter().find(|(k, _)| {
                let kn = ObjectName(k.split('.').map(String::from).collect());
                let (ks, ko) = split_name(&kn);
                ks.eq_ignore_ascii_case(&schema) && ko.eq_ignore_ascii_case(&object)
            });
            if let Some((_, obj)) = hit {
                let qn = names::dataset(&self.catalog.server, &self.catalog.database, &schema, &object, obj.generation);
                let definition = self.catalog.get(name).and_then(|o| o.definition_text.clone());
                return Some(Bound {
                    qn,
                    kind: obj.kind.unwrap_or(ObjectKind::Table),
                    columns: obj.columns.clone(),
                    definition,
                });
            }
        }
        if self.opts.mode == BindingMode::BestEffort {
            return None;
        }
        self.catalog.get(name).map(|o| Bound {
            qn: self.catalog.relation_qn(o),
            kind: o.kind,
            columns: o.columns.iter().map(|c| c.name.clone()).collect(),
            definition: o.definition_text.clone(),
        })
    }

    fn add_input(&mut self, qn: &str, ty: EntityType) {
        self.inputs.entry(qn.to_string()).or_insert(ty);
    }

    /// Target relation of a write: qualified name, type and known columns.
    fn target(&mut self, name: &ObjectName) -> (String, EntityType, Option<Vec<String>>) {
        match self.lookup(name) {
            Some(b) => {
                let cols = (!b.columns.is_empty()).then_some(b.columns);
                (b.qn, kind_type(b.kind), cols)
            }
            None => {
                self.suggest(format!("unbound relation {name}"));
                (self.catalog.name_qn(name), EntityType::Table, None)
            }
        }
    }

    // ---- statements ----------------------------------------------------

    fn statement(&mut self, stmt: &Statement, text: &str) -> Effect {
        match stmt {
            Statement::Query(q) => {
                let r = self.query(q);
                let control = self.control(&r);
                if let Some(into) = &q.body.into {
                    if into.name().starts_with('@') {
                        return Effect::None;
                    }
                    // SELECT INTO creates the table; its columns are the select list
                    let qn = self.catalog.name_qn_next(into);
                    self.outputs.insert(qn.clone(), EntityType::Table);
                    let names = output_names(&r.cols);
                    self.map_to_target(&qn, Some(names.clone()), &[], &r.cols, &control);
                    return Effect::Columns(names);
                }
                if r.assigns_only || self.inputs.is_empty() {
                    return Effect::None;
                }
                let qn = self.catalog.output_qn(&sql::text_hash(text));
                self.outputs.insert(qn.clone(), EntityType::QueryOutput);
                let names = output_names(&r.cols);
                self.map_to_target(&qn, Some(names), &[], &r.cols, &control);
                Effect::None
            }
            Statement::Insert { ctes, target, columns, source } => {
                if target.name().starts_with('@') {
                    // table variables are not datasets
                    if let InsertSource::Query(q) = source {
                        self.with_ctes(ctes, |s| {
                            s.query(q);
                        });
                    }
                    return Effect::None;
                }
                let (qn, ty, known) = self.target(target);
                self.outputs.insert(qn.clone(), ty);
                match source {
                    InsertSource::Query(q) => {
                        let r = self.with_ctes(ctes, |s| s.query(q));
                        let control = self.control(&r);
                        self.map_to_target(&qn, known, columns, &r.cols, &control);
                    }
                    InsertSource::Values(rows) => {
                        let cols = self.values_columns(rows);
                        self.map_to_target(&qn, known, columns, &cols, &BTreeSet::new());
                    }
                    InsertSource::Exec(_) => {
                        self.suggest("INSERT ... EXEC: inserted rows come from a procedure result");
                    }
                    InsertSource::DefaultValues => {}
                }
                Effect::None
            }
            Statement::Update { ctes, target, assignments, from, where_ } => {
                self.push_ctes(ctes);
                self.scopes.push(Vec::new());
                for t in from {
                    self.add_table_ref(t);
                }
                let (qn, ty, known) = self.dml_target(target);
                self.outputs.insert(qn.clone(), ty);
                let mut control = BTreeSet::new();
                for t in from {
                    if let Some(on) = &t.on {
                        control.extend(self.refs(on));
                    }
                }
                if let Some(w) = where_ {
                    control.extend(self.refs(w));
                }
                let extra = if self.opts.include_control_columns { control } else { BTreeSet::new() };
                for a in assignments {
                    let mut lineage = self.refs(&a.value);
                    lineage.extend(extra.iter().cloned());
                    let col = canonical(&known, &a.column.name);
                    if known.is_some() && col.is_none() {
                        self.suggest(format!("unknown column {}", a.column.name));
                    }
                    let col = col.unwrap_or_else(|| a.column.name.clone());
                    self.column_map.entry(names::column(&qn, &col)).or_default().extend(lineage);
                }
                self.scopes.pop();
                self.ctes.clear();
                Effect::None
            }
            Statement::Delete { ctes, target, from, where_ } => {
                self.push_ctes(ctes);
                self.scopes.push(Vec::new());
                for t in from {
                    self.add_table_ref(t);
                }
                let (qn, ty, _) = self.dml_target(target);
                self.outputs.insert(qn, ty);
                for t in from {
                    if let Some(on) = &t.on {
                        self.refs(on);
                    }
                }
                if let Some(w) = where_ {
                    self.refs(w);
                }
                self.scopes.pop();
                self.ctes.clear();
                Effect::None
            }
            Statement::Merge { target, target_alias, source, on, clauses } => {
                let (qn, ty, known) = self.target(target);
                self.outputs.insert(qn.clone(), ty);
                self.add_input(&qn, ty);
                self.scopes.push(vec![Source {
                    alias: target_alias.clone(),
                    table_name: Some(target.name().to_string()),
                    relation: Some(qn.clone()),
                    columns: known.as_ref().map(|cols| {
                        cols.iter()
                            .map(|c| OutCol {
                                name: Some(c.clone()),
                                lineage: BTreeSet::from([names::column(&qn, c)]),
                                star: false,
                            })
                            .collect()
                    }),
                }]);
                self.add_table_ref(source);
                let mut control = self.refs(on);
                for cl in clauses {
                    if let Some(cond) = &cl.condition {
                        control.extend(self.refs(cond));
                    }
                }
                let extra = if self.opts.include_control_columns { control } else { BTreeSet::new() };
                for cl in clauses {
                    match &cl.action {
                        MergeAction::Update(assignments) => {
                            for a in assignments {
                                let mut lineage = self.refs(&a.value);
                                lineage.extend(extra.iter().cloned());
                                let col = canonical(&known, &a.column.name).unwrap_or_else(|| a.column.name.clone());
                                self.column_map.entry(names::column(&qn, &col)).or_default().extend(lineage);
                            }
                        }
                        MergeAction::Insert { columns, values } => {
                            let cols: Vec<OutCol> = values
                                .iter()
                                .map(|v| OutCol { name: None, lineage: self.refs(v), star: false })
                                .collect();
                            self.map_to_target(&qn, known.clone(), columns, &cols, &extra);
                        }
                        MergeAction::Delete => {}
                    }
                }
                self.scopes.pop();
                Effect::None
            }
            Statement::BulkInsert { target, file } => {
                let (qn, ty, _) = self.target(target);
                self.outputs.insert(qn, ty);
                self.add_input(&names::file(file), EntityType::ExternalFile);
                Effect::None
            }
            Statement::Truncate { target } => {
                let (qn, ty, _) = self.target(target);
                self.outputs.insert(qn, ty);
                Effect::None
            }
            Statement::CreateTable { name, .. } => {
                let qn = self.catalog.name_qn_next(name);
                self.outputs.insert(qn, EntityType::Table);
                Effect::None
            }
            Statement::CreateView { name, columns, query, or_alter, .. } => {
                let r = self.query(query);
                let cols = self.rename(r.cols.clone(), columns);
                let qn = if *or_alter && self.catalog.get(name).is_some() {
                    self.catalog.name_qn(name)
                } else {
                    self.catalog.name_qn_next(name)
                };
                self.outputs.insert(qn.clone(), EntityType::View);
                let control = self.control(&r);
                let names = output_names(&cols);
                self.map_to_target(&qn, Some(names.clone()), &[], &cols, &control);
                Effect::Columns(names)
            }
            Statement::Exec { proc: None } => {
                self.diags.push("dynamic SQL: lineage carried by spawned statements".into());
                Effect::None
            }
            _ => Effect::None,
        }
    }

    /// UPDATE/DELETE target: a FROM alias, a FROM table, or a plain table.
    fn dml_target(&mut self, target: &ObjectName) -> (String, EntityType, Option<Vec<String>>) {
        if target.0.len() == 1 {
            let hit = self.scopes.last().and_then(|s| s.iter().find(|src| src.matches(target.name())).cloned());
            if let Some(src) = hit {
                if let Some(rel) = src.relation {
                    let ty = self.inputs.get(&rel).copied().unwrap_or(EntityType::Table);
                    let known = src.columns.map(|cols| cols.into_iter().filter_map(|c| c.name).collect());
                    return (rel, ty, known);
                }
            }
        }
        let (qn, ty, known) = self.target(target);
        // the target's columns are visible without being listed in FROM
        if let Some(scope) = self.scopes.last_mut() {
            scope.push(Source {
                alias: None,
                table_name: Some(target.name().to_string()),
                relation: Some(qn.clone()),
                columns: known.as_ref().map(|cols| column_outs(&qn, cols)),
            });
        }
        (qn, ty, known)
    }

    fn control(&self, r: &QueryResult) -> BTreeSet<String> {
        if self.opts.include_control_columns {
            r.control.clone()
        } else {
            BTreeSet::new()
        }
    }

    /// Maps source columns onto the target's columns, positionally.
    fn map_to_target(
        &mut self,
        qn: &str,
        known: Option<Vec<String>>,
        explicit: &[String],
        source: &[OutCol],
        extra: &BTreeSet<String>,
    ) {
        let names: Option<Vec<String>> = if !explicit.is_empty() {
            Some(explicit.iter().map(|e| canonical(&known, e).unwrap_or_else(|| e.clone())).collect())
        } else {
            known
        };
        let all = || source.iter().flat_map(|c| c.lineage.iter().cloned()).chain(extra.iter().cloned());
        if source.iter().any(|c| c.star) {
            let lineage: BTreeSet<String> = all().collect();
            match names {
                Some(ns) if !ns.is_empty() => {
                    for n in ns {
                        self.column_map.entry(names::column(qn, &n)).or_default().extend(lineage.iter().cloned());
                    }
                }
                _ => {
                    self.column_map.entry(star_of(qn)).or_default().extend(lineage);
                }
            }
            return;
        }
        match names {
            Some(ns) => {
                if ns.len() != source.len() {
                    self.suggest(format!("{} target columns for {} values", ns.len(), source.len()));
                }
                for (n, c) in ns.iter().zip(source) {
                    let e = self.column_map.entry(names::column(qn, n)).or_default();
                    e.extend(c.lineage.iter().cloned());
                    e.extend(extra.iter().cloned());
                }
            }
            None => {
                if source.iter().any(|c| c.name.is_none()) {
                    let lineage: BTreeSet<String> = all().collect();
                    self.column_map.entry(star_of(qn)).or_default().extend(lineage);
                } else {
                    for c in source {
                        let e = self.column_map.entry(names::column(qn, c.name.as_ref().unwrap())).or_default();
                        e.extend(c.lineage.iter().cloned());
                        e.extend(extra.iter().cloned());
                    }
                }
            }
        }
    }

    fn values_columns(&mut self, rows: &[Vec<ExprRefs>]) -> Vec<OutCol> {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut cols: Vec<OutCol> = (0..width).map(|_| OutCol { name: None, lineage: BTreeSet::new(), star: false }).collect();
        for row in rows {
            for (i, v) in row.iter().enumerate() {
                let l = self.refs(v);
                cols[i].lineage.extend(l);
            }
        }
        cols
    }

    // ---- queries ----------------------------------------------------------

    fn push_ctes(&mut self, ctes: &[Cte]) {
        for cte in ctes {
            self.ctes.push((cte.name.to_lowercase(), None));
            let r = self.query(&cte.query);
            let cols = self.rename(r.cols, &cte.columns);
            self.ctes.last_mut().unwrap().1 = Some(cols);
        }
    }

    fn with_ctes<T>(&mut self, ctes: &[Cte], f: impl FnOnce(&mut Self) -> T) -> T {
        let mark = self.ctes.len();
        self.push_ctes(ctes);
        let out = f(self);
        self.ctes.truncate(mark);
        out
    }

    fn query(&mut self, q: &Query) -> QueryResult {
        let mark = self.ctes.len();
        self.push_ctes(&q.ctes);
        let mut r = self.select(&q.body);
        for b in &q.set_branches {
            let br = self.select(b);
            if br.cols.len() != r.cols.len() && !r.cols.iter().chain(&br.cols).any(|c| c.star) {
                self.suggest("set operation branches differ in width");
            }
            if br.cols.iter().any(|c| c.star) && !r.cols.iter().any(|c| c.star) {
                // an unexpandable branch spreads over every column
                let l: BTreeSet<String> = br.cols.iter().flat_map(|c| c.lineage.iter().cloned()).collect();
                for c in &mut r.cols {
                    c.lineage.extend(l.iter().cloned());
                }
            } else {
                for (a, b) in r.cols.iter_mut().zip(br.cols) {
                    a.lineage.extend(b.lineage);
                }
            }
            r.control.extend(br.control);
        }
        self.ctes.truncate(mark);
        r
    }

    fn select(&mut self, s: &Select) -> QueryResult {
        self.scopes.push(Vec::new());
        let mut control = BTreeSet::new();
        for t in &s.from {
            self.add_table_ref(t);
        }
        for t in &s.from {
            if let Some(on) = &t.on {
                control.extend(self.refs(on));
            }
        }
        for e in [&s.where_, &s.group_by, &s.having].into_iter().flatten() {
            control.extend(self.refs(e));
        }
        let mut cols = Vec::new();
        let mut assigns = 0;
        for item in &s.items {
            match item {
                SelectItem::Wildcard => {
                    let sources = self.scopes.last().cloned().unwrap_or_default();
                    for src in &sources {
                        cols.extend(self.expand(src));
                    }
                }
                SelectItem::QualifiedWildcard(q) => {
                    let qual = q.last().map(String::as_str).unwrap_or("");
                    let src = self.scopes.last().and_then(|s| s.iter().find(|x| x.matches(qual)).cloned());
                    match src {
                        Some(src) => cols.extend(self.expand(&src)),
                        None => self.suggest(format!("unknown qualifier {qual}.*")),
                    }
                }
                SelectItem::Expr { refs, alias, assigns_variable } => {
                    let lineage = self.refs(refs);
                    if *assigns_variable {
                        assigns += 1;
                        continue;
                    }
                    let name = alias.clone().or_else(|| {
                        (refs.columns.len() == 1 && refs.subqueries.is_empty()).then(|| refs.columns[0].name.clone())
                    });
                    cols.push(OutCol { name, lineage, star: false });
                }
            }
        }
        self.scopes.pop();
        QueryResult { cols, control, assigns_only: assigns > 0 && assigns == s.items.len() }
    }

    fn expand(&mut self, src: &Source) -> Vec<OutCol> {
        match &src.columns {
            Some(cols) => cols.clone(),
            None => {
                let lineage = src.relation.iter().map(|r| star_of(r)).collect();
                self.suggest(format!(
                    "cannot expand * over {}",
                    src.relation.as_deref().or(src.table_name.as_deref()).unwrap_or("source")
                ));
                vec![OutCol { name: None, lineage, star: true }]
            }
        }
    }

    fn rename(&mut self, cols: Vec<OutCol>, names: &[String]) -> Vec<OutCol> {
        if names.is_empty() {
            return cols;
        }
        if cols.iter().any(|c| c.star) {
            let l: BTreeSet<String> = cols.iter().flat_map(|c| c.lineage.iter().cloned()).collect();
            return names.iter().map(|n| OutCol { name: Some(n.clone()), lineage: l.clone(), star: false }).collect();
        }
        if cols.len() != names.len() {
            self.suggest("column list width mismatch");
        }
        cols.into_iter()
            .zip(names)
            .map(|(c, n)| OutCol { name: Some(n.clone()), lineage: c.lineage, star: false })
            .collect()
    }

    fn add_table_ref(&mut self, t: &TableRef) {
        let src = self.source_of(&t.source);
        if let Some(s) = self.scopes.last_mut() {
            s.push(src);
        }
    }

    fn source_of(&mut self, ts: &TableSource) -> Source {
        match ts {
            TableSource::Named { name, alias } => self.named_source(name, alias.clone()),
            TableSource::Derived { query, alias, column_aliases } => {
                let r = self.query(query);
                let cols = self.rename(r.cols, column_aliases);
                Source { alias: alias.clone(), table_name: None, relation: None, columns: Some(cols) }
            }
            TableSource::Function { name, args, alias } => {
                self.refs(args);
                Source { alias: alias.clone(), table_name: Some(name.name().to_string()), relation: None, columns: None }
            }
            TableSource::Values { rows, alias, column_aliases } => {
                let cols = self.values_columns(rows);
                let cols = self.rename(cols, column_aliases);
                Source { alias: alias.clone(), table_name: None, relation: None, columns: Some(cols) }
            }
        }
    }

    fn named_source(&mut self, name: &ObjectName, alias: Option<String>) -> Source {
        let table_name = Some(name.name().to_string());
        let opaque = |alias| Source { alias, table_name: Some(name.name().to_string()), relation: None, columns: None };
        if name.0.len() == 1 {
            let lower = name.name().to_lowercase();
            if let Some((_, cols)) = self.ctes.iter().rev().find(|(n, _)| *n == lower) {
                return Source { alias, table_name, relation: None, columns: cols.clone() };
            }
        }
        if name.name().starts_with('@') || is_system(name) {
            return opaque(alias);
        }
        let Some(b) = self.lookup(name) else {
            let qn = self.catalog.name_qn(name);
            self.add_input(&qn, EntityType::Table);
            self.suggest(format!("unbound relation {name}"));
            return Source { alias, table_name, relation: Some(qn), columns: None };
        };
        let ty = kind_type(b.kind);
        self.add_input(&b.qn, ty);
        if b.kind == ObjectKind::View {
            if let Some(cols) = self.expand_view(&b) {
                return Source { alias, table_name, relation: Some(b.qn), columns: Some(cols) };
            }
        }
        let columns = (!b.columns.is_empty()).then(|| column_outs(&b.qn, &b.columns));
        if columns.is_none() {
            self.suggest(format!("no columns known for {name}"));
        }
        Source { alias, table_name, relation: Some(b.qn), columns }
    }

    /// Resolves a view's columns through its definition.
    fn expand_view(&mut self, b: &Bound) -> Option<Vec<OutCol>> {
        let def = b.definition.as_deref()?;
        if self.depth >= self.opts.max_expansion_depth {
            self.suggest(format!("view expansion depth exceeded at {}", b.qn));
            return None;
        }
        let Ok(Statement::CreateView { query, columns, .. }) = sql::parse_statement(def) else {
            self.suggest(format!("view definition of {} does not parse", b.qn));
            return None;
        };
        // the definition sees neither the caller's scopes nor its CTEs
        let scopes = std::mem::take(&mut self.scopes);
        let ctes = std::mem::take(&mut self.ctes);
        self.depth += 1;
        let r = self.query(&query);
        self.depth -= 1;
        self.scopes = scopes;
        self.ctes = ctes;
        Some(self.rename(r.cols, &columns))
    }

    /// Lineage of an expression bag.
    fn refs(&mut self, e: &ExprRefs) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &e.columns {
            out.extend(self.resolve(c));
        }
        for q in &e.subqueries {
            let r = self.query(q);
            out.extend(r.cols.into_iter().flat_map(|c| c.lineage));
        }
        out
    }

    fn resolve(&mut self, c: &ColRef) -> BTreeSet<String> {
        if let Some(qual) = c.qualifier.last() {
            let hit = self.scopes.iter().rev().find_map(|s| s.iter().find(|src| src.matches(qual)).cloned());
            return match hit {
                Some(src) => self.from_source(&src, &c.name),
                None => {
                    self.suggest(format!("unresolved column {qual}.{}", c.name));
                    BTreeSet::new()
                }
            };
        }
        for depth in (0..self.scopes.len()).rev() {
            let hit = self.scopes[depth].iter().find_map(|src| {
                src.columns
                    .as_ref()
                    .and_then(|cols| cols.iter().find(|oc| oc.name.as_deref().is_some_and(|n| n.eq_ignore_ascii_case(&c.name))))
                    .map(|oc| oc.lineage.clone())
            });
            if let Some(l) = hit {
                return l;
            }
            let unknown: Vec<Source> = self.scopes[depth].iter().filter(|s| s.columns.is_none()).cloned().collect();
            if !unknown.is_empty() {
                self.suggest(format!("column {} bound by guess", c.name));
                let rels: Vec<&String> = unknown.iter().filter_map(|s| s.relation.as_ref()).collect();
                return match rels.as_slice() {
                    [one] => BTreeSet::from([names::column(one, &c.name)]),
                    many => many.iter().map(|r| star_of(r)).collect(),
                };
            }
        }
        self.suggest(format!("unresolved column {}", c.name));
        BTreeSet::new()
    }

    fn from_source(&mut self, src: &Source, col: &str) -> BTreeSet<String> {
        match &src.columns {
            Some(cols) => {
                if let Some(oc) = cols.iter().find(|oc| oc.name.as_deref().is_some_and(|n| n.eq_ignore_ascii_case(col))) {
                    return oc.lineage.clone();
                }
                self.suggest(format!("unknown column {col}"));
                cols.iter().filter(|c| c.star).flat_map(|c| c.lineage.iter().cloned()).collect()
            }
            None => {
                if src.relation.is_some() {
                    self.suggest(format!("column {col} bound by guess"));
                }
                src.relation.iter().map(|r| names::column(r, col)).collect()
            }
        }
    }
}

fn column_outs(qn: &str, cols: &[String]) -> Vec<OutCol> {
    cols.iter()
        .map(|c| OutCol { name: Some(c.clone()), lineage: BTreeSet::from([names::column(qn, c)]), star: false })
        .collect()
}

fn canonical(known: &Option<Vec<String>>, name: &str) -> Option<String> {
    known.as_ref()?.iter().find(|k| k.eq_ignore_ascii_case(name)).cloned()
}

fn output_names(cols: &[OutCol]) -> Vec<String> {
    cols.iter().enumerate().map(|(i, c)| c.name.clone().unwrap_or_else(|| format!("col{}", i + 1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Column;
    use proptest::prelude::*;

    fn n(s: &str) -> ObjectName {
        ObjectName(s.split('.').map(String::from).collect())
    }

    fn sales_catalog() -> CatalogState {
        let mut c = CatalogState::new("srv", "db");
        let cols = |names: &[&str]| names.iter().map(|x| Column::new(*x, "int")).collect::<Vec<_>>();
        c.create(ObjectKind::Table, &n("StagedSales"), cols(&["CustomerId", "Region", "Amount"]), None);
        c.create(ObjectKind::Table, &n("ConversionRate"), cols(&["Region", "Rate"]), None);
        c.create(ObjectKind::Table, &n("SalesHistory"), cols(&["CustomerId", "Region", "Amount"]), None);
        c
    }

    fn ds(name: &str) -> String {
        format!("ds://srv/db/dbo/{name}")
    }

    fn col(t: &str, c: &str) -> String {
        format!("ds://srv/db/dbo/{t}#{c}")
    }

    fn set(items: &[String]) -> BTreeSet<String> {
        items.iter().cloned().collect()
    }

    #[test]
    fn join_insert_column_map() {
        let p = analyze_statement(
            "INSERT SalesHistory SELECT c.CustomerId, c.Region, r.Rate * c.Amount AS Amount \
             FROM StagedSales c JOIN ConversionRate r ON c.Region = r.Region",
            &sales_catalog(),
            &ProvenanceOptions::default(),
        );
        assert_eq!(p.input_names(), BTreeSet::from([ds("ConversionRate").as_str(), ds("StagedSales").as_str()]));
        assert_eq!(p.output_names(), BTreeSet::from([ds("SalesHistory").as_str()]));
        assert_eq!(p.column_map.len(), 3);
        assert_eq!(
            p.column_map[&col("SalesHistory", "Amount")],
            set(&[col("ConversionRate", "Rate"), col("StagedSales", "Amount")])
        );
        assert_eq!(p.column_map[&col("SalesHistory", "CustomerId")], set(&[col("StagedSales", "CustomerId")]));
        assert_eq!(p.column_map[&col("SalesHistory", "Region")], set(&[col("StagedSales", "Region")]));
        assert_eq!(p.confidence, Confidence::Exact);
    }

    #[test]
    fn control_columns_flag() {
        let opts = ProvenanceOptions { include_control_columns: true, ..Default::default() };
        let p = analyze_statement(
            "INSERT SalesHistory SELECT c.CustomerId, c.Region, c.Amount FROM StagedSales c JOIN ConversionRate r ON c.Region = r.Region",
            &sales_catalog(),
            &opts,
        );
        assert!(p.column_map[&col("SalesHistory", "CustomerId")].contains(&col("ConversionRate", "Region")));
    }

    #[test]
    fn set_variable_is_empty() {
        let p = analyze_statement("SET @a=2", &sales_catalog(), &ProvenanceOptions::default());
        assert!(p.is_empty());
        assert_eq!(p.confidence, Confidence::Exact);
    }

    #[test]
    fn star_best_effort_vs_state() {
        let text = "INSERT SalesHistory SELECT * FROM StagedSales";
        let be = analyze_statement(text, &CatalogState::new("srv", "db"), &ProvenanceOptions::default());
        assert_eq!(be.confidence, Confidence::Suggested);
        assert_eq!(be.column_map[&col("SalesHistory", "*")], set(&[col("StagedSales", "*")]));
        let sb = analyze_statement(text, &sales_catalog(), &ProvenanceOptions::default());
        assert_eq!(sb.confidence, Confidence::Exact);
        assert_eq!(be.inputs, sb.inputs);
        assert_eq!(be.outputs, sb.outputs);
        assert_eq!(sb.column_map[&col("SalesHistory", "Amount")], set(&[col("StagedSales", "Amount")]));
        let opts = ProvenanceOptions { mode: BindingMode::BestEffort, ..Default::default() };
        let stateless = analyze_statement(text, &sales_catalog(), &opts);
        assert_eq!(stateless.column_map, be.column_map);
    }

    #[test]
    fn statement_kinds() {
        let c = sales_catalog();
        let o = ProvenanceOptions::default();
        let p = analyze_statement("BULK INSERT StagedSales FROM 'newSales.csv'", &c, &o);
        assert_eq!(p.inputs, BTreeMap::from([("file://newSales.csv".to_string(), EntityType::ExternalFile)]));
        assert_eq!(p.output_names(), BTreeSet::from([ds("StagedSales").as_str()]));

        let p = analyze_statement(
            "IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') DELETE FROM TABLE StagedSales",
            &c,
            &o,
        );
        assert!(p.inputs.is_empty());
        assert_eq!(p.output_names(), BTreeSet::from([ds("StagedSales").as_str()]));

        let p = analyze_statement("SELECT Region, SUM(Amount) AS Total FROM StagedSales GROUP BY Region", &c, &o);
        let (out, ty) = p.outputs.iter().next().unwrap();
        assert_eq!(*ty, EntityType::QueryOutput);
        assert!(out.starts_with("ds://srv/db/_output/"));
        assert_eq!(p.column_map[&format!("{out}#Total")], set(&[col("StagedSales", "Amount")]));

        let p = analyze_statement("UPDATE SalesHistory SET Amount = Amount * 2 WHERE Region = 'EU'", &c, &o);
        assert_eq!(p.input_names(), p.output_names());

        let p = analyze_statement(
            "MERGE SalesHistory AS t USING StagedSales AS s ON t.CustomerId = s.CustomerId \
             WHEN MATCHED THEN UPDATE SET t.Amount = s.Amount \
             WHEN NOT MATCHED THEN INSERT (CustomerId, Region, Amount) VALUES (s.CustomerId, s.Region, s.Amount);",
            &c,
            &o,
        );
        assert_eq!(p.input_names(), BTreeSet::from([ds("SalesHistory").as_str(), ds("StagedSales").as_str()]));
        assert_eq!(p.column_map[&col("SalesHistory", "Region")], set(&[col("StagedSales", "Region")]));

        let p = analyze_statement("SELECT CustomerId, Amount INTO Archive FROM SalesHistory", &c, &o);
        assert_eq!(p.column_map[&col("Archive", "Amount")], set(&[col("SalesHistory", "Amount")]));

        assert!(analyze_statement("EXEC sp_executesql N'INSERT T SELECT 1'", &c, &o).is_empty());
        assert!(analyze_statement("EXECUTE CleanAndAppendSalesHistory @v", &c, &o).is_empty());

        let p = analyze_statement("TRUNCATE TABLE StagedSales", &c, &o);
        assert_eq!(p.output_names().len(), 1);
    }

    #[test]
    fn unsupported_syntax_degrades() {
        let p = analyze_statement("SELECT a FROM T PIVOT (SUM(x) FOR y IN ([1])) p", &sales_catalog(), &ProvenanceOptions::default());
        assert!(p.is_empty());
        assert_eq!(p.confidence, Confidence::Suggested);
        assert!(!p.diagnostics.is_empty());
    }

    #[test]
    fn ddl_replay() {
        let c = CatalogState::new("srv", "db");
        let c1 = apply_ddl(&c, "CREATE TABLE T(a int, b int)").unwrap();
        let t = c1.get(&n("T")).unwrap();
        assert_eq!(t.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let c2 = apply_ddl(&c1, "DROP TABLE T; CREATE TABLE T(x int)").unwrap();
        let t = c2.get(&n("T")).unwrap();
        assert_eq!((t.generation, t.columns[0].name.as_str()), (2, "x"));
        assert_eq!(c2.name_qn(&n("T")), "ds://srv/db/dbo/T@2");
        assert!(matches!(apply_ddl(&c2, "CREATE TABLE ("), Err(ProvenanceError::UnsupportedSyntax(_))));
        assert_eq!(apply_ddl(&c2, "SELECT 1").unwrap(), c2);
    }

    #[test]
    fn view_expansion() {
        let c = apply_ddl(&CatalogState::new("srv", "db"), "CREATE TABLE T(a int, b int)").unwrap();
        let c = apply_ddl(&c, "CREATE VIEW V AS SELECT a FROM T").unwrap();
        assert!(c.get(&n("V")).unwrap().definition_text.is_some());
        let p = analyze_statement("INSERT U SELECT * FROM V", &c, &ProvenanceOptions::default());
        // oracle: V.a is T.a
        assert_eq!(p.column_map[&col("U", "a")], set(&[col("T", "a")]));
        assert!(p.inputs.contains_key(&ds("T")));
        assert_eq!(p.inputs[&ds("V")], EntityType::View);
    }

    #[test]
    fn cyclic_view_is_suggested() {
        let mut c = CatalogState::new("srv", "db");
        c.create(ObjectKind::View, &n("V"), vec![Column::new("a", "")], Some("CREATE VIEW V AS SELECT a FROM V".into()));
        let p = analyze_statement("SELECT a FROM V", &c, &ProvenanceOptions::default());
        assert_eq!(p.confidence, Confidence::Suggested);
    }

    #[test]
    fn script_sees_earlier_ddl() {
        let mut c = CatalogState::new("srv", "db");
        c.create(ObjectKind::Table, &n("S"), vec![Column::new("x", "int")], None);
        let p = analyze_statement("CREATE TABLE T(a int); INSERT T SELECT x AS a FROM S", &c, &ProvenanceOptions::default());
        assert_eq!(p.column_map[&col("T", "a")], set(&[col("S", "x")]));
        assert_eq!(p.confidence, Confidence::Exact);
        // reversed order: T is unknown when the INSERT is analyzed
        let q = analyze_statement("INSERT T SELECT x AS a FROM S; CREATE TABLE T(a int)", &c, &ProvenanceOptions::default());
        assert_eq!(q.confidence, Confidence::Suggested);
    }

    #[test]
    fn prebound_overlay() {
        let mut ann = Bindings::new();
        ann.insert("StagedSales".into(), BoundObject { columns: vec!["Id".into(), "Amt".into()], generation: 3, kind: None });
        ann.insert("dbo.Out".into(), BoundObject { columns: vec!["Id".into(), "Amt".into()], generation: 1, kind: None });
        let opts = ProvenanceOptions { mode: BindingMode::PreBound, ..Default::default() };
        let mut c = CatalogState::new("srv", "db");
        let p = analyze_text("0", "INSERT Out SELECT * FROM StagedSales", &mut c, Some(&ann), &opts);
        assert_eq!(p.confidence, Confidence::Exact);
        assert_eq!(p.column_map[&col("Out", "Amt")], set(&["ds://srv/db/dbo/StagedSales@3#Amt".to_string()]));
    }

    #[test]
    fn cte_and_subqueries() {
        let c = sales_catalog();
        let p = analyze_statement(
            "WITH s AS (SELECT CustomerId AS Id, Amount FROM StagedSales) \
             INSERT SalesHistory (CustomerId, Amount) SELECT Id, (SELECT MAX(Rate) FROM ConversionRate) * Amount FROM s",
            &c,
            &ProvenanceOptions::default(),
        );
        assert_eq!(p.column_map[&col("SalesHistory", "CustomerId")], set(&[col("StagedSales", "CustomerId")]));
        assert_eq!(
            p.column_map[&col("SalesHistory", "Amount")],
            set(&[col("ConversionRate", "Rate"), col("StagedSales", "Amount")])
        );
        assert_eq!(p.confidence, Confidence::Exact);
    }

    #[test]
    fn script_generation_preorder() {
        use crate::event::{EventClass::*, EventKind::*};
        use crate::qqtree::{build_qqtree, testutil::ev, Activity};
        let events = vec![
            ev("3", 0, Started, SqlBatch, "EXECUTE SyncNewSales 2"),
            ev("3", 1, Started, SpStatement, "BULK INSERT StagedSales FROM 'newSales.csv'"),
            ev("3", 2, Completed, SpStatement, ""),
            ev("3", 3, Started, SpStatement, "EXECUTE CleanAndAppendSalesHistory @trackingSystemVersion"),
            ev("3", 4, Started, SpStatement, "INSERT SalesHistory SELECT * FROM StagedSales"),
            ev("3", 5, Completed, SpStatement, ""),
            ev("3", 6, Completed, SpStatement, ""),
            ev("3", 7, Completed, SqlBatch, ""),
        ];
        let t = build_qqtree(&Activity::new("3", events)).unwrap();
        let s = generate_script(&t);
        let ids: Vec<_> = s.statements.iter().map(|x| x.node_id.as_str()).collect();
        assert_eq!(ids, ["0", "0.0", "0.1", "0.1.0"]);
        for st in &s.statements {
            assert_eq!(&s.text[st.span.0..st.span.1], st.text);
        }
        let mut c = sales_catalog();
        let m = extract_provenance(&s, &mut c, &ProvenanceOptions::default());
        assert!(!m.contains_key("0"));
        assert_eq!(m["0.1.0"].output_names(), BTreeSet::from([ds("SalesHistory").as_str()]));
        assert!(m["0.1"].is_empty());
    }

    fn table_names() -> impl Strategy<Value = Vec<String>> {
        proptest::sample::subsequence(vec!["A", "B", "C", "D"], 1..=3)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        // Best-effort and state-based agree on relations for base tables.
        #[test]
        fn modes_agree_on_relations(srcs in table_names(), target in "[E-G]", kind in 0..3u8) {
            let mut c = CatalogState::new("srv", "db");
            for t in ["A", "B", "C", "D", "E", "F", "G"] {
                c.create(ObjectKind::Table, &n(t), vec![Column::new("k", "int"), Column::new(format!("v{t}"), "int")], None);
            }
            let from = srcs.iter().enumerate().map(|(i, s)| if i == 0 { s.clone() } else { format!("JOIN {s} ON {s}.k = {}.k", srcs[0]) }).collect::<Vec<_>>().join(" ");
            let text = match kind {
                0 => format!("INSERT {target} SELECT * FROM {from}"),
                1 => format!("INSERT {target} (k) SELECT {}.k FROM {from}", srcs[0]),
                _ => format!("SELECT * INTO New{target} FROM {from}"),
            };
            let sb = analyze_statement(&text, &c, &ProvenanceOptions::default());
            let be = analyze_statement(&text, &c, &ProvenanceOptions { mode: BindingMode::BestEffort, ..Default::default() });
            prop_assert_eq!(sb.input_names(), be.input_names());
            prop_assert_eq!(sb.output_names(), be.output_names());
            // column closure
            for p in [&sb, &be] {
                for (k, vs) in &p.column_map {
                    prop_assert!(p.outputs.contains_key(relation_of_column(k)));
                    for v in vs {
                        prop_assert!(p.inputs.contains_key(relation_of_column(v)));
                    }
                }
            }
            prop_assert_eq!(analyze_statement(&text, &c, &ProvenanceOptions::default()), sb);
        }
    }
}
