//! Noise reduction: query routing, activity filters, loop compression,
//! last-K admission, aggregation-level dropping and event-buffer loss.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::catalog::CatalogState;
use crate::event::{serialize_event, EventClass, EventKind, EventMetadata, QueryEvent};
use crate::graph::{EntityType, Guid, ProvenanceGraph, RelKind};
use crate::provenance::{analyze_statement, BindingMode, Confidence, ProvenanceOptions};
use crate::qqtree::{QQTree, QQTreeNode, Routing};
use crate::runtime::{invoked_procedure, static_name};
use crate::sql;

/// How many of the most recent occurrences to admit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Admit {
    Last(u32),
    #[default]
    All,
}

impl Admit {
    pub fn limit(self) -> Option<usize> {
        match self {
            Admit::Last(n) => Some(n as usize),
            Admit::All => None,
        }
    }
}

impl fmt::Display for Admit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Admit::Last(n) => write!(f, "{n}"),
            Admit::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for Admit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "inf" | "unlimited" => Ok(Admit::All),
            n => n.parse::<u32>().map(Admit::Last).map_err(|_| format!("expected a count or \"all\", got {s:?}")),
        }
    }
}

impl Serialize for Admit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Admit::Last(n) => s.serialize_u32(*n),
            Admit::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Admit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Admit::Last(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// What to do with a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Drop,
    RuntimeOnly,
    Full,
}

impl Decision {
    pub fn is_interesting(self) -> bool {
        self == Decision::Full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// Leading keywords, e.g. `SET` or `UPDATE STATISTICS`.
    Type,
    /// Normalized token template. `...` matches any token run, `_` one
    /// (possibly dotted) name, `?` one literal.
    SyntaxTemplate,
    Regex,
    /// Statements that read and write no relation.
    NoDatasetAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: MatchKind,
    #[serde(default)]
    pub pattern: String,
    pub action: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    /// Drop when any event satisfies the condition.
    #[default]
    Any,
    /// Drop when every completed event satisfies it.
    AllCompleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataPredicate {
    pub expr: String,
    #[serde(default)]
    pub quantifier: Quantifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Statement,
    Batch,
    Procedure,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Statement, Level::Batch, Level::Procedure];

    pub fn of(ty: EntityType) -> Option<Level> {
        use EntityType::*;
        match ty {
            AdhocStatement | AdhocStatementRun | SpStatement | SpStatementRun => Some(Level::Statement),
            Batch | BatchRun => Some(Level::Batch),
            StoredProcedure | StoredProcedureRun => Some(Level::Procedure),
            _ => None,
        }
    }
}

/// Content an activity must have to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    Ddl,
    ProcedureExecution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Loop iterations kept per detected loop (k).
    pub loop_iters_admitted: Admit,
    /// Executions kept per interesting query (K).
    pub sp_runs_admitted: Admit,
    /// Keep whole admitted activities rather than pruning stale executions in them.
    pub keep_context: bool,
    pub use_builtin_patterns: bool,
    pub uninteresting_query_patterns: Vec<QueryPattern>,
    pub metadata_predicates: Vec<MetadataPredicate>,
    /// Activities must contain at least one of these; empty means no requirement.
    pub required_content: Vec<Requirement>,
    pub emit_levels: BTreeSet<Level>,
    /// Simulated event buffer in bytes, applied when generating logs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_events_buffer: Option<usize>,
}

impl Default for FilterConfig {
    /// No filtering at all.
    fn default() -> Self {
        FilterConfig {
            loop_iters_admitted: Admit::All,
            sp_runs_admitted: Admit::All,
            keep_context: true,
            use_builtin_patterns: false,
            uninteresting_query_patterns: Vec::new(),
            metadata_predicates: Vec::new(),
            required_content: Vec::new(),
            emit_levels: Level::ALL.into_iter().collect(),
            drop_events_buffer: None,
        }
    }
}

impl FilterConfig {
    /// Production defaults: latest loop iteration, latest execution, builtin
    /// patterns, every level, no event dropping.
    pub fn production() -> Self {
        FilterConfig {
            loop_iters_admitted: Admit::Last(1),
            sp_runs_admitted: Admit::Last(1),
            keep_context: false,
            use_builtin_patterns: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.loop_iters_admitted == Admit::Last(0) || self.sp_runs_admitted == Admit::Last(0) {
            return Err(FilterError::InvalidConfig("admitted counts must be at least 1".into()));
        }
        if self.emit_levels.is_empty() {
            return Err(FilterError::InvalidConfig("emit_levels must not be empty".into()));
        }
        if self.drop_events_buffer == Some(0) {
            return Err(FilterError::InvalidConfig("drop_events_buffer must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FilterError {
    #[error("invalid pattern {name}: {reason}")]
    InvalidPattern { name: String, reason: String },
    #[error("invalid metadata predicate {expr:?}: {reason}")]
    InvalidPredicate { expr: String, reason: String },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
}

#[derive(Deserialize)]
struct PatternFile {
    pattern: Vec<QueryPattern>,
}

/// The shipped list of uninteresting queries.
pub fn builtin_patterns() -> Vec<QueryPattern> {
    let file: PatternFile =
        toml::from_str(include_str!("../data/builtin_patterns.toml")).expect("builtin pattern file parses");
    file.pattern
}

enum Matcher {
    Type(Vec<String>),
    Template(Template),
    Regex(Regex),
    NoDatasetAccess,
}

struct Template {
    /// Fixed token runs separated by `...`; empty first/last runs mean unanchored.
    segments: Vec<Vec<String>>,
}

fn canon(tok: &str) -> String {
    tok.trim_start_matches('[').trim_end_matches(']').to_uppercase()
}

impl Template {
    fn compile(src: &str) -> Option<Template> {
        let mut segments = Vec::new();
        for part in src.split("...") {
            segments.push(sql::normalized_tokens(part, true)?.iter().map(|t| canon(t)).collect());
        }
        Some(Template { segments })
    }

    /// End of `seg` matched at `at`, if it matches there.
    fn match_segment(seg: &[String], toks: &[String], mut at: usize) -> Option<usize> {
        for want in seg {
            let got = toks.get(at)?;
            if want == "_" {
                if got == "." || got == "(" || got == ")" || got == "," || got == "?" {
                    return None;
                }
                at += 1;
                while toks.get(at).is_some_and(|t| t == ".") && toks.get(at + 1).is_some() {
                    at += 2;
                }
            } else if want == got {
                at += 1;
            } else {
                return None;
            }
        }
        Some(at)
    }

    fn matches(&self, toks: &[String]) -> bool {
        let n = self.segments.len();
        if n == 1 {
            return Self::match_segment(&self.segments[0], toks, 0) == Some(toks.len());
        }
        let Some(mut at) = Self::match_segment(&self.segments[0], toks, 0) else { return false };
        for seg in &self.segments[1..n - 1] {
            if seg.is_empty() {
                continue;
            }
            match (at..toks.len()).find_map(|s| Self::match_segment(seg, toks, s)) {
                Some(end) => at = end,
                None => return false,
            }
        }
        let last = &self.segments[n - 1];
        last.is_empty() || (at..=toks.len()).any(|s| Self::match_segment(last, toks, s) == Some(toks.len()))
    }
}

struct CompiledPattern {
    matcher: Matcher,
    action: Decision,
}

/// Filter configuration with patterns and predicates compiled, plus a per-text
/// decision cache.
pub struct Filters {
    pub config: FilterConfig,
    patterns: Vec<CompiledPattern>,
    predicates: Vec<(Expr, Quantifier)>,
    cache: Mutex<HashMap<String, Decision>>,
}

impl fmt::Debug for Filters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Filters").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Filters {
    pub fn new(config: FilterConfig) -> Result<Self, FilterError> {
        config.validate()?;
        let mut all = config.uninteresting_query_patterns.clone();
        if config.use_builtin_patterns {
            all.extend(builtin_patterns());
        }
        let mut patterns = Vec::new();
        for (i, p) in all.iter().enumerate() {
            let name = p.name.clone().unwrap_or_else(|| format!("#{i}"));
            let bad = |reason: String| FilterError::InvalidPattern { name: name.clone(), reason };
            if p.action == Decision::Full {
                return Err(bad("action must be drop or runtime_only".into()));
            }
            if p.kind != MatchKind::NoDatasetAccess && p.pattern.trim().is_empty() {
                return Err(bad("empty pattern".into()));
            }
            let matcher = match p.kind {
                MatchKind::Type => Matcher::Type(p.pattern.split_whitespace().map(str::to_uppercase).collect()),
                MatchKind::SyntaxTemplate => {
                    Matcher::Template(Template::compile(&p.pattern).ok_or_else(|| bad("template does not tokenize".into()))?)
                }
                MatchKind::Regex => Matcher::Regex(Regex::new(&p.pattern).map_err(|e| bad(e.to_string()))?),
                MatchKind::NoDatasetAccess => Matcher::NoDatasetAccess,
            };
            patterns.push(CompiledPattern { matcher, action: p.action });
        }
        let mut predicates = Vec::new();
        for p in &config.metadata_predicates {
            let e = parse_predicate(&p.expr)
                .map_err(|reason| FilterError::InvalidPredicate { expr: p.expr.clone(), reason })?;
            predicates.push((e, p.quantifier));
        }
        Ok(Filters { config, patterns, predicates, cache: Mutex::new(HashMap::new()) })
    }

    pub fn none() -> Self {
        Filters::new(FilterConfig::default()).expect("default config is valid")
    }

    fn decide(&self, text: &str) -> Decision {
        if self.patterns.is_empty() {
            return Decision::Full;
        }
        let mut toks: Option<Vec<String>> = None;
        for p in &self.patterns {
            let hit = match &p.matcher {
                Matcher::Type(words) => {
                    let t = toks.get_or_insert_with(|| sql::normalized_tokens(text, true).unwrap_or_default());
                    t.len() >= words.len() && t.iter().zip(words).all(|(a, b)| a == b)
                }
                Matcher::Template(tpl) => {
                    let t = toks.get_or_insert_with(|| sql::normalized_tokens(text, true).unwrap_or_default());
                    let canon: Vec<String> = t.iter().map(|x| canon(x)).collect();
                    tpl.matches(&canon)
                }
                Matcher::Regex(re) => re.is_match(text),
                Matcher::NoDatasetAccess => accesses_no_dataset(text),
            };
            if hit {
                return p.action;
            }
        }
        Decision::Full
    }
}

fn accesses_no_dataset(text: &str) -> bool {
    if text.trim().is_empty() {
        return true;
    }
    // what a procedure touches shows up in its own statements
    if crate::qqtree::is_exec_text(text) {
        return false;
    }
    let opts = ProvenanceOptions { mode: BindingMode::BestEffort, ..Default::default() };
    let p = analyze_statement(text, &CatalogState::default(), &opts);
    p.is_empty() && p.confidence == Confidence::Exact
}

/// Routing for one query text; the first matching pattern decides, no match
/// means full processing.
pub fn is_interesting_query(text: &str, f: &Filters) -> Decision {
    if let Some(d) = f.cache.lock().expect("cache lock").get(text) {
        return *d;
    }
    let d = f.decide(text);
    f.cache.lock().expect("cache lock").insert(text.to_string(), d);
    d
}

/// Applies query routing to every node. Dropped nodes disappear with their
/// subtrees; `None` when the root itself is dropped.
pub fn route_tree(mut t: QQTree, f: &Filters) -> Option<QQTree> {
    fn go(n: &mut QQTreeNode, f: &Filters) {
        n.children.retain(|c| is_interesting_query(c.text(), f) != Decision::Drop);
        for c in &mut n.children {
            if is_interesting_query(c.text(), f) == Decision::RuntimeOnly {
                c.routing = Routing::RuntimeOnly;
            }
            go(c, f);
        }
    }
    match is_interesting_query(t.root.text(), f) {
        Decision::Drop => return None,
        Decision::RuntimeOnly => t.root.routing = Routing::RuntimeOnly,
        Decision::Full => {}
    }
    go(&mut t.root, f);
    Some(t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(String),
}

fn is_ddl(text: &str) -> bool {
    let first = text.split_whitespace().next().unwrap_or("");
    ["CREATE", "ALTER", "DROP", "TRUNCATE"].iter().any(|k| first.eq_ignore_ascii_case(k))
}

/// Activity-level filtering over an already routed tree.
pub fn filter_activity(t: &QQTree, events: &[QueryEvent], f: &Filters) -> Verdict {
    let mut any_full = false;
    let mut has_ddl = false;
    let mut has_exec = false;
    t.root.walk(&mut |n| {
        any_full |= n.routing == Routing::Full;
        has_ddl |= is_ddl(n.text());
        has_exec |= crate::qqtree::is_exec_text(n.text());
    });
    if !any_full {
        return Verdict::Drop("no interesting query".into());
    }
    for (expr, q) in &f.predicates {
        let hit = match q {
            Quantifier::Any => events.iter().any(|e| expr.eval(e)),
            Quantifier::AllCompleted => {
                let mut done = events.iter().filter(|e| e.kind == EventKind::Completed).peekable();
                done.peek().is_some() && done.all(|e| expr.eval(e))
            }
        };
        if hit {
            return Verdict::Drop("metadata predicate".into());
        }
    }
    let req = &f.config.required_content;
    if !req.is_empty() {
        let ok = req.iter().any(|r| match r {
            Requirement::Ddl => has_ddl,
            Requirement::ProcedureExecution => has_exec,
        });
        if !ok {
            return Verdict::Drop("required content missing".into());
        }
    }
    Verdict::Keep
}

fn loop_key(n: &QQTreeNode) -> String {
    format!("{}|{}", n.class().as_str(), sql::normalize(n.text(), true))
}

pub const MAX_LOOP_PERIOD: usize = 32;

/// Detected runs `(start, period, repetitions)` in a key sequence. At each
/// position the period covering the most elements wins, ties to the shorter.
pub fn detect_cycles(keys: &[u32]) -> Vec<(usize, usize, usize)> {
    let n = keys.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut best: Option<(usize, usize)> = None;
        for p in 1..=MAX_LOOP_PERIOD.min((n - i) / 2) {
            let mut r = 1;
            while i + (r + 1) * p <= n && keys[i + r * p..i + (r + 1) * p] == keys[i..i + p] {
                r += 1;
            }
            if r >= 2 && best.is_none_or(|(bp, br)| r * p > bp * br) {
                best = Some((p, r));
            }
        }
        match best {
            Some((p, r)) => {
                out.push((i, p, r));
                i += p * r;
            }
            None => i += 1,
        }
    }
    out
}

/// Keeps the last `k` repetitions of every detected loop among siblings.
/// Retained nodes record the repetition count.
pub fn loop_compress(mut t: QQTree, k: Admit) -> QQTree {
    let Some(k) = k.limit() else { return t };
    let k = k.max(1);
    fn go(n: &mut QQTreeNode, k: usize) {
        for c in &mut n.children {
            go(c, k);
        }
        // removing a loop can make its neighbours repeat, so run to a fixpoint
        while n.children.len() >= 2 && compress_siblings(&mut n.children, k) {}
    }
    go(&mut t.root, k);
    t
}

/// One detection pass over a sibling list; false when nothing was removed.
fn compress_siblings(children: &mut Vec<QQTreeNode>, k: usize) -> bool {
    let mut ids: HashMap<String, u32> = HashMap::new();
    let keys: Vec<u32> = children
        .iter()
        .map(|c| {
            let next = ids.len() as u32;
            *ids.entry(loop_key(c)).or_insert(next)
        })
        .collect();
    let cycles = detect_cycles(&keys);
    if cycles.iter().all(|&(_, _, r)| r <= k) {
        return false;
    }
    let mut keep = vec![true; keys.len()];
    let mut annotate = vec![0u32; keys.len()];
    for (s, p, r) in cycles {
        if r <= k {
            continue;
        }
        let cut = s + (r - k) * p;
        keep[s..cut].iter_mut().for_each(|x| *x = false);
        annotate[cut..s + r * p].iter_mut().for_each(|x| *x = r as u32);
    }
    let old = std::mem::take(children);
    for (i, mut c) in old.into_iter().enumerate() {
        if keep[i] {
            if annotate[i] > 0 {
                c.compressed_iterations = c.compressed_iterations.max(annotate[i]);
            }
            children.push(c);
        }
    }
    true
}

/// A routed tree awaiting admission, with its activity's ordering key.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// (trigger time, first seq).
    pub order: (i64, u64),
    pub tree: QQTree,
}

/// Interesting executions in a tree: the root and every procedure invocation
/// whose subtree holds a fully processed node. `(static name, node id, (ts, seq))`.
pub fn interesting_executions(t: &QQTree) -> Vec<(String, String, (i64, u64))> {
    fn has_full(n: &QQTreeNode) -> bool {
        n.routing == Routing::Full || n.children.iter().any(has_full)
    }
    fn go(n: &QQTreeNode, enclosing: Option<&str>, root: bool, out: &mut Vec<(String, String, (i64, u64))>) {
        let proc = invoked_procedure(n);
        if (root || proc.is_some()) && has_full(n) {
            let key = match &proc {
                Some(p) if n.class() != EventClass::SqlBatch => {
                    crate::graph::names::static_query(&n.started.metadata.database_name, p)
                }
                _ => static_name(n, enclosing).0,
            };
            out.push((key, n.node_id.clone(), n.started.order_key()));
        }
        let inner = proc.as_deref().or(enclosing);
        for c in &n.children {
            go(c, inner, false, out);
        }
    }
    let mut out = Vec::new();
    go(&t.root, None, true, &mut out);
    out
}

fn remove_subtrees(n: &mut QQTreeNode, doomed: &HashSet<String>) {
    n.children.retain(|c| !doomed.contains(&c.node_id));
    for c in &mut n.children {
        remove_subtrees(c, doomed);
    }
}

/// Two-pass last-K admission over one ordered collect window.
pub fn admit_last_k_runs(batch: Vec<Candidate>, k: Admit, keep_context: bool) -> Vec<Candidate> {
    let Some(k) = k.limit() else { return batch };
    let execs: Vec<_> = batch.iter().map(|c| interesting_executions(&c.tree)).collect();
    // pass 1: the last K execution stamps per static query
    let mut stamps: HashMap<String, Vec<((i64, u64), (i64, u64))>> = HashMap::new();
    for (c, ex) in batch.iter().zip(&execs) {
        for (key, _, at) in ex {
            stamps.entry(key.clone()).or_default().push((c.order, *at));
        }
    }
    let mut latest: HashMap<String, HashSet<((i64, u64), (i64, u64))>> = HashMap::new();
    for (key, mut v) in stamps {
        v.sort_unstable();
        let from = v.len().saturating_sub(k);
        latest.insert(key, v[from..].iter().copied().collect());
    }
    // pass 2
    let mut out = Vec::new();
    for (mut c, ex) in batch.into_iter().zip(execs) {
        let fresh: Vec<bool> = ex.iter().map(|(key, _, at)| latest[key.as_str()].contains(&(c.order, *at))).collect();
        if !fresh.iter().any(|x| *x) {
            continue;
        }
        if !keep_context {
            let root = c.tree.root.node_id.clone();
            let doomed: HashSet<String> = ex
                .iter()
                .zip(&fresh)
                .filter(|((_, node, _), f)| !**f && *node != root)
                .map(|((_, node, _), _)| node.clone())
                .collect();
            if !doomed.is_empty() {
                remove_subtrees(&mut c.tree.root, &doomed);
            }
        }
        out.push(c);
    }
    out
}

/// Removes the runs of levels not in `levels` along with their edges. Static
/// queries stay, since they hold lineage already aggregated across runs.
/// Surviving runs are re-attached to their nearest surviving ancestor run, and
/// relations or connections left without any edge are removed.
pub fn drop_aggregation_levels(mut g: ProvenanceGraph, levels: &BTreeSet<Level>) -> ProvenanceGraph {
    if Level::ALL.iter().all(|l| levels.contains(l)) {
        return g;
    }
    let doomed: HashSet<Guid> = g
        .entities()
        .filter(|e| e.entity_type.is_run() && Level::of(e.entity_type).is_some_and(|l| !levels.contains(&l)))
        .map(|e| e.guid)
        .collect();
    let parent: HashMap<Guid, Guid> =
        g.relationships().filter(|r| r.kind == RelKind::SpawnedBy).map(|r| (r.from, r.to)).collect();
    let mut relink = Vec::new();
    for (&child, &p) in &parent {
        if doomed.contains(&child) || !doomed.contains(&p) {
            continue;
        }
        let mut cur = p;
        let mut hops = 0;
        while doomed.contains(&cur) && hops <= parent.len() {
            match parent.get(&cur) {
                Some(next) => cur = *next,
                None => break,
            }
            hops += 1;
        }
        if !doomed.contains(&cur) {
            relink.push((child, cur));
        }
    }
    g.remove_entities(&doomed);
    for (c, p) in relink {
        g.relate(RelKind::SpawnedBy, c, p);
    }
    let mut touched: HashSet<Guid> = HashSet::new();
    for r in g.relationships() {
        if r.kind != RelKind::ColumnOf {
            touched.insert(r.from);
            touched.insert(r.to);
        }
    }
    let orphans: HashSet<Guid> = g
        .entities()
        .filter(|e| {
            (e.entity_type.is_relation() || e.entity_type == EntityType::ClientConnection) && !touched.contains(&e.guid)
        })
        .map(|e| e.guid)
        .collect();
    g.remove_entities(&orphans);
    let columns: HashSet<Guid> = {
        let live: HashSet<Guid> =
            g.relationships().filter(|r| r.kind == RelKind::ColumnOf).map(|r| r.from).collect();
        g.entities().filter(|e| e.entity_type == EntityType::Column && !live.contains(&e.guid)).map(|e| e.guid).collect()
    };
    g.remove_entities(&columns);
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetentionModel {
    pub buffer_bytes: usize,
    /// Bytes the consumer drains per second of log time.
    pub drain_bytes_per_sec: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetentionStats {
    pub events_in: usize,
    pub events_dropped: usize,
    pub bytes_in: usize,
    pub bytes_dropped: usize,
}

/// Simulates a bounded event buffer drained at a constant rate; when an
/// arrival overflows it, the oldest buffered events are discarded. Input must
/// be in timestamp order; survivors keep that order.
pub fn drop_events_retention(events: Vec<QueryEvent>, m: &RetentionModel) -> (Vec<QueryEvent>, RetentionStats) {
    let mut stats = RetentionStats::default();
    let cap = m.buffer_bytes.max(1) as f64;
    let rate = m.drain_bytes_per_sec / 1e6;
    let mut queue: std::collections::VecDeque<(QueryEvent, usize)> = std::collections::VecDeque::new();
    let mut fill = 0f64;
    let mut partial = 0f64;
    let mut last_ts: Option<i64> = None;
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let size = serialize_event(&e).len() + 1;
        stats.events_in += 1;
        stats.bytes_in += size;
        if let Some(prev) = last_ts {
            let mut budget = partial + (e.timestamp - prev).max(0) as f64 * rate;
            while let Some((_, s)) = queue.front() {
                if (*s as f64) > budget {
                    break;
                }
                budget -= *s as f64;
                fill -= *s as f64;
                out.push(queue.pop_front().unwrap().0);
            }
            partial = if queue.is_empty() { 0.0 } else { budget };
        }
        last_ts = Some(e.timestamp);
        queue.push_back((e, size));
        fill += size as f64;
        while fill > cap {
            let Some((_, s)) = queue.pop_front() else { break };
            fill -= s as f64;
            partial = 0.0;
            stats.events_dropped += 1;
            stats.bytes_dropped += s;
        }
    }
    out.extend(queue.into_iter().map(|(e, _)| e));
    (out, stats)
}

// ---- metadata predicates ----

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Num(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Like,
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Or(Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Cmp(String, Cmp, Value),
    In(String, Vec<Value>),
    IsNull(String, bool),
}

const STR_FIELDS: [&str; 8] =
    ["username", "client_app_name", "client_host", "server_name", "database_name", "class", "kind", "query_text"];
const NUM_FIELDS: [&str; 7] =
    ["cpu_time_us", "duration_us", "rows_inserted", "rows_updated", "rows_deleted", "rows_returned", "timestamp"];

fn field(e: &QueryEvent, name: &str) -> Option<Value> {
    let m: &EventMetadata = &e.metadata;
    let s = |v: &str| Some(Value::Str(v.to_string()));
    let n = |v: Option<i64>| v.map(|x| Value::Num(x as f64));
    match name {
        "username" => s(&m.username),
        "client_app_name" => s(&m.client_app_name),
        "client_host" => s(&m.client_host),
        "server_name" => s(&m.server_name),
        "database_name" => s(&m.database_name),
        "class" => s(e.class.as_str()),
        "kind" => s(e.kind.as_str()),
        "query_text" => e.query_text.as_deref().map(|t| Value::Str(t.to_string())),
        "cpu_time_us" => n(m.cpu_time_us),
        "duration_us" => n(m.duration_us),
        "rows_inserted" => n(m.rows_inserted),
        "rows_updated" => n(m.rows_updated),
        "rows_deleted" => n(m.rows_deleted),
        "rows_returned" => n(m.rows_returned),
        "timestamp" => n(Some(e.timestamp)),
        _ => None,
    }
}

fn like(text: &str, pat: &str) -> bool {
    let t: Vec<char> = text.to_lowercase().chars().collect();
    let p: Vec<char> = pat.to_lowercase().chars().collect();
    // classic wildcard DP: % any run, _ one char
    let mut dp = vec![false; t.len() + 1];
    dp[0] = true;
    for pc in p {
        let mut next = vec![false; t.len() + 1];
        if pc == '%' {
            let mut seen = false;
            for i in 0..=t.len() {
                seen |= dp[i];
                next[i] = seen;
            }
        } else {
            for i in 1..=t.len() {
                next[i] = dp[i - 1] && (pc == '_' || pc == t[i - 1]);
            }
        }
        dp = next;
    }
    dp[t.len()]
}

fn compare(a: &Value, op: Cmp, b: &Value) -> bool {
    use std::cmp::Ordering;
    let ord = match (a, b) {
        (Value::Num(x), Value::Num(y)) => x.partial_cmp(y),
        (Value::Str(x), Value::Str(y)) => {
            if op == Cmp::Like {
                return like(x, y);
            }
            Some(x.to_lowercase().cmp(&y.to_lowercase()))
        }
        _ => None,
    };
    let Some(ord) = ord else { return false };
    match op {
        Cmp::Eq => ord == Ordering::Equal,
        Cmp::Ne => ord != Ordering::Equal,
        Cmp::Lt => ord == Ordering::Less,
        Cmp::Le => ord != Ordering::Greater,
        Cmp::Gt => ord == Ordering::Greater,
        Cmp::Ge => ord != Ordering::Less,
        Cmp::Like => false,
    }
}

impl Expr {
    fn eval(&self, e: &QueryEvent) -> bool {
        match self {
            Expr::Or(a, b) => a.eval(e) || b.eval(e),
            Expr::And(a, b) => a.eval(e) && b.eval(e),
            Expr::Not(a) => !a.eval(e),
            Expr::Cmp(f, op, v) => field(e, f).is_some_and(|x| compare(&x, *op, v)),
            Expr::In(f, vs) => field(e, f).is_some_and(|x| vs.iter().any(|v| compare(&x, Cmp::Eq, v))),
            Expr::IsNull(f, want) => field(e, f).is_none() == *want,
        }
    }
}

struct PredParser {
    toks: Vec<sql::lexer::Token>,
    i: usize,
}

fn parse_predicate(src: &str) -> Result<Expr, String> {
    let toks = sql::lexer::tokenize(src).map_err(|e| e.to_string())?;
    let mut p = PredParser { toks, i: 0 };
    let e = p.or()?;
    if p.i != p.toks.len() {
        return Err(format!("unexpected input at byte {}", p.toks[p.i].pos));
    }
    Ok(e)
}

impl PredParser {
    fn kw(&mut self, kw: &str) -> bool {
        if self.toks.get(self.i).is_some_and(|t| t.is_kw(kw)) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn tok(&self) -> Option<&sql::lexer::Tok> {
        self.toks.get(self.i).map(|t| &t.tok)
    }

    fn or(&mut self) -> Result<Expr, String> {
        let mut l = self.and()?;
        while self.kw("OR") {
            l = Expr::Or(Box::new(l), Box::new(self.and()?));
        }
        Ok(l)
    }

    fn and(&mut self) -> Result<Expr, String> {
        let mut l = self.unary()?;
        while self.kw("AND") {
            l = Expr::And(Box::new(l), Box::new(self.unary()?));
        }
        Ok(l)
    }

    fn unary(&mut self) -> Result<Expr, String> {
        use sql::lexer::Tok;
        if self.kw("NOT") {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        if self.tok() == Some(&Tok::LParen) {
            self.i += 1;
            let e = self.or()?;
            if self.tok() != Some(&Tok::RParen) {
                return Err("missing )".into());
            }
            self.i += 1;
            return Ok(e);
        }
        let name = match self.tok() {
            Some(Tok::Ident { text, .. }) => text.to_lowercase(),
            _ => return Err("expected a field name".into()),
        };
        if !STR_FIELDS.contains(&name.as_str()) && !NUM_FIELDS.contains(&name.as_str()) {
            return Err(format!("unknown field {name}"));
        }
        self.i += 1;
        if self.kw("IS") {
            let negated = self.kw("NOT");
            if !self.kw("NULL") {
                return Err("expected NULL".into());
            }
            return Ok(Expr::IsNull(name, !negated));
        }
        let negated = self.kw("NOT");
        if self.kw("IN") {
            if self.tok() != Some(&Tok::LParen) {
                return Err("expected ( after IN".into());
            }
            self.i += 1;
            let mut vs = vec![self.value()?];
            while self.tok() == Some(&Tok::Comma) {
                self.i += 1;
                vs.push(self.value()?);
            }
            if self.tok() != Some(&Tok::RParen) {
                return Err("missing )".into());
            }
            self.i += 1;
            let e = Expr::In(name, vs);
            return Ok(if negated { Expr::Not(Box::new(e)) } else { e });
        }
        if self.kw("LIKE") {
            let e = Expr::Cmp(name, Cmp::Like, self.value()?);
            return Ok(if negated { Expr::Not(Box::new(e)) } else { e });
        }
        if negated {
            return Err("expected IN or LIKE after NOT".into());
        }
        let op = match self.tok() {
            Some(Tok::Op(o)) => match o.as_str() {
                "=" | "==" => Cmp::Eq,
                "!=" | "<>" => Cmp::Ne,
                "<" => Cmp::Lt,
                "<=" => Cmp::Le,
                ">" => Cmp::Gt,
                ">=" => Cmp::Ge,
                other => return Err(format!("unknown operator {other}")),
            },
            _ => return Err("expected a comparison".into()),
        };
        self.i += 1;
        let v = self.value()?;
        let numeric = NUM_FIELDS.contains(&name.as_str());
        if numeric != matches!(v, Value::Num(_)) {
            return Err(format!("type mismatch comparing {name}"));
        }
        Ok(Expr::Cmp(name, op, v))
    }

    fn value(&mut self) -> Result<Value, String> {
        use sql::lexer::Tok;
        let neg = matches!(self.tok(), Some(Tok::Op(o)) if o == "-");
        if neg {
            self.i += 1;
        }
        let v = match self.tok() {
            Some(Tok::Str(s)) => Value::Str(s.clone()),
            Some(Tok::Number(n)) => {
                let x: f64 = n.parse().map_err(|_| format!("bad number {n}"))?;
                Value::Num(if neg { -x } else { x })
            }
            _ => return Err("expected a literal".into()),
        };
        self.i += 1;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventClass::*, EventKind::*};
    use crate::qqtree::testutil::ev;
    use crate::qqtree::{build_qqtree, Activity};
    use proptest::prelude::*;

    fn with(patterns: Vec<QueryPattern>) -> Filters {
        Filters::new(FilterConfig { uninteresting_query_patterns: patterns, ..Default::default() }).unwrap()
    }

    fn pat(kind: MatchKind, pattern: &str, action: Decision) -> QueryPattern {
        QueryPattern { name: None, kind, pattern: pattern.into(), action }
    }

    #[test]
    fn statman_template_drops() {
        let f = with(vec![pat(MatchKind::SyntaxTemplate, "SELECT STATMAN(...) FROM _ ...", Decision::Drop)]);
        assert_eq!(is_interesting_query("SELECT StatMan([SC0], [SC1]) FROM [dbo].[Orders] WITH (READUNCOMMITTED)", &f), Decision::Drop);
        assert_eq!(is_interesting_query("select statman(x) from T", &f), Decision::Drop);
        assert_eq!(is_interesting_query("SELECT a FROM T", &f), Decision::Full);
    }

    #[test]
    fn no_dataset_access_is_runtime_only() {
        let f = with(vec![pat(MatchKind::NoDatasetAccess, "", Decision::RuntimeOnly)]);
        assert_eq!(is_interesting_query("SET @a=2", &f), Decision::RuntimeOnly);
        assert_eq!(is_interesting_query("SELECT 1", &f), Decision::RuntimeOnly);
        assert_eq!(is_interesting_query("INSERT T SELECT * FROM U", &f), Decision::Full);
        assert_eq!(is_interesting_query("CREATE TABLE X (a int)", &f), Decision::Full);
    }

    #[test]
    fn empty_pattern_list_is_full() {
        let f = Filters::none();
        for t in ["SET @a=2", "SELECT STATMAN(a) FROM T", "", "garbage ((("] {
            assert_eq!(is_interesting_query(t, &f), Decision::Full);
        }
    }

    #[test]
    fn first_match_wins_and_kinds() {
        let f = with(vec![
            pat(MatchKind::Type, "update statistics", Decision::Drop),
            pat(MatchKind::Regex, r"(?i)^\s*DBCC\b", Decision::Drop),
            pat(MatchKind::Type, "SET", Decision::RuntimeOnly),
            pat(MatchKind::Type, "SET", Decision::Drop),
        ]);
        assert_eq!(is_interesting_query("UPDATE STATISTICS dbo.T", &f), Decision::Drop);
        assert_eq!(is_interesting_query("UPDATE T SET a = 1", &f), Decision::Full);
        assert_eq!(is_interesting_query("dbcc checkdb", &f), Decision::Drop);
        assert_eq!(is_interesting_query("SET NOCOUNT ON", &f), Decision::RuntimeOnly);
    }

    #[test]
    fn builtin_patterns_load_and_compile() {
        let pats = builtin_patterns();
        assert!(pats.len() >= 40, "{} builtin patterns", pats.len());
        let f = Filters::new(FilterConfig::production()).unwrap();
        assert_eq!(is_interesting_query("SELECT STATMAN([SC0]) FROM [dbo].[T]", &f), Decision::Drop);
        assert_eq!(is_interesting_query("SELECT @@VERSION", &f), Decision::Drop);
        assert_eq!(is_interesting_query("exec sp_reset_connection", &f), Decision::Drop);
        assert_eq!(is_interesting_query("SET @a = 2", &f), Decision::RuntimeOnly);
        assert_eq!(is_interesting_query("INSERT SalesHistory SELECT * FROM StagedSales", &f), Decision::Full);
        assert_eq!(is_interesting_query("EXECUTE SyncNewSales 2", &f), Decision::Full);
        assert_eq!(
            is_interesting_query("IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='S') DELETE FROM TABLE S", &f),
            Decision::Full
        );
    }

    #[test]
    fn bad_patterns_are_rejected() {
        let bad = |p| Filters::new(FilterConfig { uninteresting_query_patterns: vec![p], ..Default::default() });
        assert!(matches!(bad(pat(MatchKind::Regex, "(", Decision::Drop)), Err(FilterError::InvalidPattern { .. })));
        assert!(matches!(bad(pat(MatchKind::Type, " ", Decision::Drop)), Err(FilterError::InvalidPattern { .. })));
        assert!(matches!(bad(pat(MatchKind::Type, "SET", Decision::Full)), Err(FilterError::InvalidPattern { .. })));
        let cfg = FilterConfig { sp_runs_admitted: Admit::Last(0), ..Default::default() };
        assert!(matches!(Filters::new(cfg), Err(FilterError::InvalidConfig(_))));
        let cfg = FilterConfig { emit_levels: BTreeSet::new(), ..Default::default() };
        assert!(matches!(Filters::new(cfg), Err(FilterError::InvalidConfig(_))));
    }

    fn activity(aid: &str, texts: &[&str], meta: impl Fn(&mut QueryEvent)) -> (QQTree, Vec<QueryEvent>) {
        let mut events = vec![ev(aid, 0, Started, SqlBatch, texts[0])];
        let mut seq = 1;
        for t in &texts[1..] {
            events.push(ev(aid, seq, Started, SpStatement, t));
            events.push(ev(aid, seq + 1, Completed, SpStatement, ""));
            seq += 2;
        }
        events.push(ev(aid, seq, Completed, SqlBatch, ""));
        events.iter_mut().for_each(&meta);
        let t = build_qqtree(&Activity::new(aid, events.clone())).unwrap();
        (t, events)
    }

    fn with_predicate(expr: &str, quantifier: Quantifier) -> Filters {
        let p = MetadataPredicate { expr: expr.into(), quantifier };
        Filters::new(FilterConfig { metadata_predicates: vec![p], ..Default::default() }).unwrap()
    }

    #[test]
    fn metadata_predicate_drops_ssms() {
        let f = with_predicate("client_app_name = 'SSMS' or username = 'sa'", Quantifier::Any);
        let (t, ev1) = activity("a", &["EXEC P"], |e| e.metadata.client_app_name = "SSMS".into());
        assert!(matches!(filter_activity(&t, &ev1, &f), Verdict::Drop(_)));
        let (t, ev2) = activity("b", &["EXEC P"], |e| e.metadata.client_app_name = "app".into());
        assert_eq!(filter_activity(&t, &ev2, &f), Verdict::Keep);
        let (t, ev3) = activity("c", &["EXEC P"], |e| e.metadata.username = "SA".into());
        assert!(matches!(filter_activity(&t, &ev3, &f), Verdict::Drop(_)));
    }

    #[test]
    fn duration_threshold_uses_completed_events() {
        let f = with_predicate("duration_us < 1000000", Quantifier::AllCompleted);
        let (t, ev1) = activity("a", &["EXEC P", "INSERT T SELECT * FROM U"], |_| {});
        assert!(matches!(filter_activity(&t, &ev1, &f), Verdict::Drop(_)));
        let (t, ev2) = activity("b", &["EXEC P", "INSERT T SELECT * FROM U"], |e| {
            if e.kind == Completed {
                e.metadata.duration_us = Some(5_000_000);
            }
        });
        assert_eq!(filter_activity(&t, &ev2, &f), Verdict::Keep);
    }

    #[test]
    fn required_ddl() {
        let cfg = FilterConfig { required_content: vec![Requirement::Ddl], ..Default::default() };
        let f = Filters::new(cfg).unwrap();
        let (t, e) = activity("a", &["SELECT 1", "CREATE TABLE X (a int)"], |_| {});
        assert_eq!(filter_activity(&t, &e, &f), Verdict::Keep);
        let (t, e) = activity("b", &["SELECT 1", "INSERT X VALUES (1)"], |_| {});
        assert!(matches!(filter_activity(&t, &e, &f), Verdict::Drop(_)));
        let (t, e) = activity("c", &["SELECT 1"], |_| {});
        assert_eq!(filter_activity(&t, &e, &Filters::none()), Verdict::Keep);
    }

    #[test]
    fn runtime_only_activity_is_dropped() {
        let f = with(vec![pat(MatchKind::NoDatasetAccess, "", Decision::RuntimeOnly)]);
        let (t, e) = activity("a", &["SET NOCOUNT ON", "SET @a = 1"], |_| {});
        let t = route_tree(t, &f).unwrap();
        assert!(matches!(filter_activity(&t, &e, &f), Verdict::Drop(_)));
    }

    #[test]
    fn predicate_syntax_errors() {
        for bad in ["", "username =", "nosuch = 1", "duration_us = 'x'", "username = 'a' or", "(username = 'a'"] {
            assert!(parse_predicate(bad).is_err(), "{bad}");
        }
        let e = parse_predicate("client_host LIKE 'web%' AND NOT database_name IN ('tempdb', 'master')").unwrap();
        let mut x = ev("a", 0, Started, SqlBatch, "x");
        x.metadata.client_host = "web-01".into();
        x.metadata.database_name = "sales".into();
        assert!(e.eval(&x));
        x.metadata.database_name = "TempDB".into();
        assert!(!e.eval(&x));
        assert!(parse_predicate("cpu_time_us IS NULL").unwrap().eval(&x));
    }

    fn loop_tree(texts: &[String]) -> QQTree {
        let mut events = vec![ev("l", 0, Started, SqlBatch, "EXEC P")];
        for (i, t) in texts.iter().enumerate() {
            events.push(ev("l", 1 + 2 * i as u64, Started, SpStatement, t));
            events.push(ev("l", 2 + 2 * i as u64, Completed, SpStatement, ""));
        }
        events.push(ev("l", 1 + 2 * texts.len() as u64, Completed, SqlBatch, ""));
        build_qqtree(&Activity::new("l", events)).unwrap()
    }

    #[test]
    fn sixteen_iterations_compress_to_one() {
        let texts: Vec<String> = (0..16).map(|i| format!("INSERT T VALUES ({i})")).collect();
        let t = loop_compress(loop_tree(&texts), Admit::Last(1));
        assert_eq!(t.root.children.len(), 1);
        assert_eq!(t.root.children[0].compressed_iterations, 16);
        assert_eq!(t.root.children[0].text(), "INSERT T VALUES (15)");
    }

    #[test]
    fn unlimited_k_is_identity() {
        let texts: Vec<String> = (0..6).map(|_| "SELECT 1".to_string()).collect();
        let t = loop_tree(&texts);
        assert_eq!(loop_compress(t.clone(), Admit::All), t);
    }

    #[test]
    fn period_three_keeps_last_two_cycles() {
        let cyc = ["SELECT a FROM X", "UPDATE Y SET b = 1", "DELETE FROM Z"];
        let texts: Vec<String> = (0..15).map(|i| cyc[i % 3].to_string()).collect();
        let t = loop_tree(&texts);
        let ids: Vec<String> = t.root.children[9..].iter().map(|c| c.node_id.clone()).collect();
        let c = loop_compress(t, Admit::Last(2));
        assert_eq!(c.root.children.iter().map(|c| c.node_id.clone()).collect::<Vec<_>>(), ids);
        assert!(c.root.children.iter().all(|c| c.compressed_iterations == 5));
    }

    /// Sequence of blocks over disjoint alphabets: each block is a cycle of
    /// distinct symbols repeated some number of times.
    fn blocks() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((1usize..=6, 1usize..=6), 1..6)
    }

    fn oracle(blocks: &[(usize, usize)], k: usize) -> (Vec<u32>, Vec<u32>) {
        // brute force: each block is known, so the expected survivors follow directly
        let (mut all, mut kept) = (Vec::new(), Vec::new());
        let mut sym = 0u32;
        for &(p, r) in blocks {
            let cyc: Vec<u32> = (sym..sym + p as u32).collect();
            sym += p as u32;
            for rep in 0..r {
                all.extend(&cyc);
                if r < 2 || r <= k || rep >= r - k {
                    kept.extend(&cyc);
                }
            }
        }
        (all, kept)
    }

    proptest! {
        #[test]
        fn compression_matches_block_oracle(bs in blocks(), k in 1usize..4) {
            let (all, kept) = oracle(&bs, k);
            let texts: Vec<String> = all.iter().map(|s| format!("SELECT c FROM T{s}")).collect();
            let t = loop_compress(loop_tree(&texts), Admit::Last(k as u32));
            let got: Vec<String> = t.root.children.iter().map(|c| c.text().to_string()).collect();
            let want: Vec<String> = kept.iter().map(|s| format!("SELECT c FROM T{s}")).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn compression_is_idempotent(seq in prop::collection::vec(0u8..3, 0..40), k in 1u32..4) {
            let texts: Vec<String> = seq.iter().map(|s| format!("SELECT {s} FROM T{s}")).collect();
            let once = loop_compress(loop_tree(&texts), Admit::Last(k));
            let twice = loop_compress(once.clone(), Admit::Last(k));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn metadata_and_pattern_filters_commute(apps in prop::collection::vec(0u8..3, 1..8), texts in prop::collection::vec(0u8..3, 1..8)) {
            let stmts = ["SET @a = 1", "INSERT T SELECT * FROM U", "SELECT STATMAN(a) FROM T"];
            let pf = with(vec![
                pat(MatchKind::SyntaxTemplate, "SELECT STATMAN(...) FROM ...", Decision::Drop),
                pat(MatchKind::NoDatasetAccess, "", Decision::RuntimeOnly),
            ]);
            let mf = with_predicate("client_app_name = 'SSMS'", Quantifier::Any);
            let batch: Vec<(QQTree, Vec<QueryEvent>)> = apps.iter().zip(texts.iter().cycle()).enumerate().map(|(i, (a, s))| {
                let app = ["SSMS", "app", "etl"][*a as usize];
                activity(&format!("x{i}"), &["EXEC P", stmts[*s as usize]], |e| e.metadata.client_app_name = app.into())
            }).collect();
            let by_pattern = |t: &QQTree, e: &[QueryEvent]| {
                route_tree(t.clone(), &pf).filter(|r| filter_activity(r, e, &pf) == Verdict::Keep)
            };
            let pattern_first: Vec<String> = batch.iter()
                .filter_map(|(t, e)| by_pattern(t, e).map(|r| (r, e)))
                .filter(|(r, e)| filter_activity(r, e, &mf) == Verdict::Keep)
                .map(|(r, _)| r.activity_id)
                .collect();
            let meta_first: Vec<String> = batch.iter()
                .filter(|(t, e)| filter_activity(t, e, &mf) == Verdict::Keep)
                .filter_map(|(t, e)| by_pattern(t, e).map(|r| r.activity_id))
                .collect();
            prop_assert_eq!(pattern_first, meta_first);
        }
    }

    fn proc_activity(aid: &str, ts: i64, procs: &[&str]) -> Candidate {
        let mut events = vec![ev(aid, 0, Started, SqlBatch, "SET NOCOUNT ON")];
        let mut seq = 1;
        for p in procs {
            events.push(ev(aid, seq, Started, SqlStatement, &format!("EXEC {p}")));
            events.push(ev(aid, seq + 1, Started, SpStatement, &format!("INSERT {p}_out SELECT * FROM src")));
            events.push(ev(aid, seq + 2, Completed, SpStatement, ""));
            events.push(ev(aid, seq + 3, Completed, SqlStatement, ""));
            seq += 4;
        }
        events.push(ev(aid, seq, Completed, SqlBatch, ""));
        for e in &mut events {
            e.timestamp += ts;
        }
        let t = build_qqtree(&Activity::new(aid, events)).unwrap();
        let f = with(vec![pat(MatchKind::NoDatasetAccess, "", Decision::RuntimeOnly)]);
        Candidate { order: (ts, 0), tree: route_tree(t, &f).unwrap() }
    }

    fn ids(v: &[Candidate]) -> Vec<&str> {
        v.iter().map(|c| c.tree.activity_id.as_str()).collect()
    }

    #[test]
    fn last_k_keeps_latest_per_query() {
        let batch: Vec<Candidate> = (0..1707).map(|i| proc_activity(&format!("n{i}"), i * 1000, &["new_order"])).collect();
        let out = admit_last_k_runs(batch.clone(), Admit::Last(1), false);
        assert_eq!(ids(&out), ["n1706"]);
        let out = admit_last_k_runs(batch.clone(), Admit::Last(16), false);
        assert_eq!(out.len(), 16);
        assert_eq!(admit_last_k_runs(batch.clone(), Admit::All, false).len(), 1707);
    }

    #[test]
    fn context_flag_controls_stale_pruning() {
        // a1: X; a2: X then Y; a3: X. Latest X is a3, latest Y is a2.
        let batch = vec![
            proc_activity("a1", 0, &["X"]),
            proc_activity("a2", 1000, &["X", "Y"]),
            proc_activity("a3", 2000, &["X"]),
        ];
        let keep = admit_last_k_runs(batch.clone(), Admit::Last(1), true);
        assert_eq!(ids(&keep), ["a2", "a3"]);
        assert_eq!(keep[0].tree.node_count(), 5);
        let prune = admit_last_k_runs(batch, Admit::Last(1), false);
        assert_eq!(ids(&prune), ["a2", "a3"]);
        let texts: Vec<String> = prune[0].tree.preorder().iter().map(|n| n.text().to_string()).collect();
        assert!(!texts.iter().any(|t| t == "EXEC X"), "{texts:?}");
        assert!(texts.iter().any(|t| t == "EXEC Y"));
    }

    #[test]
    fn ties_break_by_sequence() {
        let mut a = proc_activity("a", 0, &["X"]);
        let mut b = proc_activity("b", 0, &["X"]);
        a.order = (0, 5);
        b.order = (0, 2);
        let out = admit_last_k_runs(vec![b, a], Admit::Last(1), false);
        assert_eq!(ids(&out), ["a"]);
    }

    #[test]
    fn admitted_executions_enumerable_by_hand() {
        // every admissible set for K=1 must contain the last X and the last Y
        let batch = vec![
            proc_activity("a1", 0, &["X", "Y"]),
            proc_activity("a2", 1000, &["Y"]),
            proc_activity("a3", 2000, &["X"]),
        ];
        let out = admit_last_k_runs(batch, Admit::Last(1), true);
        assert_eq!(ids(&out), ["a2", "a3"]);
    }

    #[test]
    fn retention_without_pressure_drops_nothing() {
        let (_, e) = activity("a", &["EXEC P", "SELECT 1"], |_| {});
        let m = RetentionModel { buffer_bytes: 1 << 30, drain_bytes_per_sec: 1.0 };
        let (out, stats) = drop_events_retention(e.clone(), &m);
        assert_eq!(out, e);
        assert_eq!(stats.events_dropped, 0);
        let tiny = RetentionModel { buffer_bytes: 10, drain_bytes_per_sec: 0.0 };
        let (out, stats) = drop_events_retention(e.clone(), &tiny);
        assert!(out.is_empty());
        assert_eq!(stats.events_dropped, e.len());
    }

    #[test]
    fn levels_all_is_identity() {
        let mut g = ProvenanceGraph::new();
        let p = g.ensure(EntityType::StoredProcedure, "q://db/p").unwrap();
        let t = g.ensure(EntityType::Table, "ds://s/d/dbo/T").unwrap();
        g.relate(RelKind::Output, p, t);
        let all: BTreeSet<Level> = Level::ALL.into_iter().collect();
        assert_eq!(drop_aggregation_levels(g.clone(), &all), g);
    }

    #[test]
    fn admit_parses() {
        assert_eq!("all".parse::<Admit>().unwrap(), Admit::All);
        assert_eq!("8".parse::<Admit>().unwrap(), Admit::Last(8));
        assert!("x".parse::<Admit>().is_err());
        let cfg = FilterConfig::production();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<FilterConfig>(&text).unwrap(), cfg);
    }
}
