//! Activities and the query-dependency tree built from their events.

use crate::event::{EventClass, EventKind, QueryEvent};

/// Events sharing one activity id, ordered by `(timestamp, seq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    pub activity_id: String,
    pub events: Vec<QueryEvent>,
    pub trigger_time: i64,
}

impl Activity {
    /// Sorts `events` and derives the trigger time. Panics on an empty list.
    pub fn new(activity_id: impl Into<String>, mut events: Vec<QueryEvent>) -> Self {
        assert!(!events.is_empty(), "activity without events");
        events.sort_by_key(QueryEvent::order_key);
        let trigger_time = events[0].timestamp;
        Activity { activity_id: activity_id.into(), events, trigger_time }
    }

    pub fn first_seq(&self) -> u64 {
        self.events[0].seq
    }

    /// `(trigger_time, first seq)`; the tiebreak order for "latest" decisions.
    pub fn order_key(&self) -> (i64, u64) {
        (self.trigger_time, self.first_seq())
    }

    pub fn log_bytes(&self) -> usize {
        self.events.iter().map(|e| crate::event::serialize_event(e).len() + 1).sum()
    }
}

/// How downstream extractors treat a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Routing {
    #[default]
    Full,
    /// Kept for runtime metadata, skipped by statement analysis.
    RuntimeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QQTreeNode {
    /// Child indices from the root, dot separated: `"0"`, `"0.2.1"`.
    pub node_id: String,
    pub started: QueryEvent,
    pub completed: Option<QueryEvent>,
    pub children: Vec<QQTreeNode>,
    /// Loop iterations this node stands for after compression (1 = untouched).
    pub compressed_iterations: u32,
    pub routing: Routing,
}

impl QQTreeNode {
    pub fn class(&self) -> EventClass {
        self.started.class
    }

    pub fn text(&self) -> &str {
        self.started.text()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Node id of the parent, derived from the path.
    pub fn parent_id(&self) -> Option<&str> {
        self.node_id.rsplit_once('.').map(|(p, _)| p)
    }

    pub fn depth(&self) -> usize {
        self.node_id.bytes().filter(|b| *b == b'.').count()
    }

    /// `(started ts, completed ts)`; an open node extends to `i64::MAX`.
    pub fn interval(&self) -> (i64, i64) {
        (self.started.timestamp, self.completed.as_ref().map_or(i64::MAX, |c| c.timestamp))
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_| n += 1);
        n
    }

    /// Pre-order visit without recursion.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a QQTreeNode)) {
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            f(n);
            stack.extend(n.children.iter().rev());
        }
    }

    pub fn walk_mut(&mut self, f: &mut impl FnMut(&mut QQTreeNode)) {
        f(self);
        for c in &mut self.children {
            c.walk_mut(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QQTree {
    pub activity_id: String,
    pub root: QQTreeNode,
}

impl QQTree {
    pub fn node_count(&self) -> usize {
        self.root.count()
    }

    pub fn preorder(&self) -> Vec<&QQTreeNode> {
        let mut out = Vec::new();
        self.root.walk(&mut |n| out.push(n));
        out
    }

    pub fn find(&self, node_id: &str) -> Option<&QQTreeNode> {
        let mut parts = node_id.split('.');
        if parts.next()? != "0" {
            return None;
        }
        let mut cur = &self.root;
        // ids keep their build-time index even after siblings are removed
        for p in parts {
            cur = cur.children.iter().find(|c| c.node_id.rsplit('.').next() == Some(p))?;
        }
        Some(cur)
    }

    /// Depth of the deepest node (root = 0).
    pub fn height(&self) -> usize {
        let mut h = 0;
        self.root.walk(&mut |n| h = h.max(n.depth()));
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("malformed activity {activity_id}: {reason}")]
    MalformedActivity { activity_id: String, reason: String },
}

impl TreeError {
    fn new(activity_id: &str, reason: impl Into<String>) -> Self {
        TreeError::MalformedActivity { activity_id: activity_id.to_string(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeOptions {
    /// Use the literal subtree predicate (batches and EXECUTE statements only
    /// open a subtree) instead of treating every open node as a parent.
    pub strict_subtree: bool,
    pub max_depth: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { strict_subtree: false, max_depth: 1024 }
    }
}

/// True when the text starts with an `EXEC`/`EXECUTE` keyword.
pub fn is_exec_text(text: &str) -> bool {
    let t = text.trim_start();
    let word: String = t.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    word.eq_ignore_ascii_case("exec") || word.eq_ignore_ascii_case("execute")
}

fn starts_subtree(e: &QueryEvent, opts: &TreeOptions) -> bool {
    !opts.strict_subtree || e.class == EventClass::SqlBatch || is_exec_text(e.text())
}

struct Slot {
    started: QueryEvent,
    completed: Option<QueryEvent>,
    parent: Option<usize>,
    children: Vec<usize>,
    node_id: String,
    depth: usize,
}

pub fn build_qqtree(a: &Activity) -> Result<QQTree, TreeError> {
    build_qqtree_with(a, &TreeOptions::default())
}

/// Stack-based matching of started/completed events. Linear in the number of
/// events; plan-profile records are skipped.
pub fn build_qqtree_with(a: &Activity, opts: &TreeOptions) -> Result<QQTree, TreeError> {
    let aid = a.activity_id.as_str();
    let mut slots: Vec<Slot> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut cur_parent: Option<usize> = None;
    let mut root: Option<usize> = None;
    let mut last_key: Option<(i64, u64)> = None;

    for e in a.events.iter().filter(|e| !e.is_plan_profile()) {
        if e.activity_id != a.activity_id {
            return Err(TreeError::new(aid, format!("event seq {} belongs to activity {}", e.seq, e.activity_id)));
        }
        if last_key.is_some_and(|k| k >= e.order_key()) {
            return Err(TreeError::new(aid, format!("events out of order at seq {}", e.seq)));
        }
        last_key = Some(e.order_key());

        match e.kind {
            EventKind::Started => {
                let idx = slots.len();
                if stack.is_empty() {
                    if root.is_some() {
                        return Err(TreeError::new(aid, format!("second root at seq {}", e.seq)));
                    }
                    root = Some(idx);
                    slots.push(Slot { started: e.clone(), completed: None, parent: None, children: vec![], node_id: "0".into(), depth: 0 });
                    cur_parent = Some(idx);
                } else {
                    let p = cur_parent.expect("open stack implies a current parent");
                    if slots[p].depth + 1 > opts.max_depth {
                        return Err(TreeError::new(aid, format!("nesting deeper than {}", opts.max_depth)));
                    }
                    let node_id = format!("{}.{}", slots[p].node_id, slots[p].children.len());
                    slots[p].children.push(idx);
                    let depth = slots[p].depth + 1;
                    slots.push(Slot { started: e.clone(), completed: None, parent: Some(p), children: vec![], node_id, depth });
                    if starts_subtree(e, opts) {
                        cur_parent = Some(idx);
                    }
                }
                stack.push(idx);
            }
            EventKind::Completed => {
                let Some(idx) = stack.pop() else {
                    return Err(TreeError::new(aid, format!("completed event seq {} without a started event", e.seq)));
                };
                let s = &slots[idx].started;
                if s.class != e.class {
                    return Err(TreeError::new(
                        aid,
                        format!("completed {} at seq {} closes started {}", e.class.as_str(), e.seq, s.class.as_str()),
                    ));
                }
                if let Some(t) = &e.query_text {
                    if t != s.text() {
                        return Err(TreeError::new(aid, format!("completed event seq {} names a different query", e.seq)));
                    }
                }
                let subtree = starts_subtree(s, opts);
                slots[idx].completed = Some(e.clone());
                if subtree {
                    cur_parent = slots[idx].parent;
                }
            }
        }
    }
    if !stack.is_empty() {
        return Err(TreeError::new(aid, format!("{} started events without completion", stack.len())));
    }
    let Some(root) = root else {
        return Err(TreeError::new(aid, "no events"));
    };
    Ok(QQTree { activity_id: a.activity_id.clone(), root: into_owned(slots, root) })
}

fn into_owned(slots: Vec<Slot>, root: usize) -> QQTreeNode {
    let mut taken: Vec<Option<Slot>> = slots.into_iter().map(Some).collect();
    // children always have larger indices than their parent, so building
    // bottom-up by descending index sees every child before its parent
    let mut built: Vec<Option<QQTreeNode>> = (0..taken.len()).map(|_| None).collect();
    for i in (0..taken.len()).rev() {
        let s = taken[i].take().unwrap();
        let children = s.children.iter().map(|c| built[*c].take().unwrap()).collect();
        built[i] = Some(QQTreeNode {
            node_id: s.node_id,
            started: s.started,
            completed: s.completed,
            children,
            compressed_iterations: 1,
            routing: Routing::Full,
        });
    }
    built[root].take().unwrap()
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;
    use EventClass::*;
    use EventKind::*;

    #[test]
    fn single_pair_is_single_node() {
        let a = Activity::new("x", vec![ev("x", 0, Started, SqlStatement, "SELECT 1"), ev("x", 1, Completed, SqlStatement, "")]);
        let t = build_qqtree(&a).unwrap();
        assert_eq!(t.root.node_id, "0");
        assert!(t.root.is_leaf());
        assert!(t.root.completed.is_some());
    }

    #[test]
    fn completed_first_aborts() {
        let a = Activity::new("x", vec![ev("x", 0, Completed, SqlStatement, ""), ev("x", 1, Started, SqlStatement, "s")]);
        assert!(build_qqtree(&a).is_err());
    }

    #[test]
    fn class_mismatch_aborts() {
        let a = Activity::new("x", vec![ev("x", 0, Started, SqlBatch, "b"), ev("x", 1, Completed, SqlStatement, "")]);
        let err = build_qqtree(&a).unwrap_err();
        assert!(err.to_string().contains("closes started"), "{err}");
    }

    #[test]
    fn text_mismatch_aborts() {
        let mut done = ev("x", 1, Completed, SqlStatement, "");
        done.query_text = Some("other".into());
        let a = Activity::new("x", vec![ev("x", 0, Started, SqlStatement, "s"), done]);
        assert!(build_qqtree(&a).is_err());
    }

    #[test]
    fn unfinished_aborts() {
        let a = Activity::new(
            "x",
            vec![ev("x", 0, Started, SqlBatch, "b"), ev("x", 1, Started, SqlStatement, "s"), ev("x", 2, Completed, SqlStatement, "")],
        );
        let err = build_qqtree(&a).unwrap_err();
        assert!(err.to_string().contains("without completion"));
    }

    #[test]
    fn plan_records_are_skipped() {
        let mut plan = ev("x", 2, Completed, SqlStatement, "");
        plan.plan_payload = Some("<plan/>".into());
        let a = Activity::new("x", vec![ev("x", 0, Started, SqlStatement, "s"), ev("x", 1, Completed, SqlStatement, ""), plan]);
        assert_eq!(build_qqtree(&a).unwrap().node_count(), 1);
    }

    fn nested_with_open_sibling() -> Activity {
        // a statement that is still open when the next one starts
        Activity::new(
            "x",
            vec![
                ev("x", 0, Started, SqlBatch, "batch"),
                ev("x", 1, Started, SqlStatement, "UPDATE T SET a = 1"),
                ev("x", 2, Started, SqlStatement, "INSERT Audit VALUES (1)"),
                ev("x", 3, Completed, SqlStatement, ""),
                ev("x", 4, Completed, SqlStatement, ""),
                ev("x", 5, Completed, SqlBatch, ""),
            ],
        )
    }

    #[test]
    fn default_predicate_nests_under_open_statement() {
        let t = build_qqtree(&nested_with_open_sibling()).unwrap();
        assert_eq!(
            shape(&t.root),
            Shape("batch".into(), vec![Shape("UPDATE T SET a = 1".into(), vec![Shape("INSERT Audit VALUES (1)".into(), vec![])])])
        );
        assert_eq!(t.find("0.0.0").unwrap().text(), "INSERT Audit VALUES (1)");
    }

    #[test]
    fn strict_predicate_keeps_plain_statements_flat() {
        let opts = TreeOptions { strict_subtree: true, ..Default::default() };
        let t = build_qqtree_with(&nested_with_open_sibling(), &opts).unwrap();
        assert_eq!(t.root.children.len(), 2);
        assert_eq!(t.root.children[1].node_id, "0.1");
    }

    #[test]
    fn depth_cap() {
        let mut evs = vec![];
        let n = 6u64;
        for i in 0..n {
            evs.push(ev("x", i, Started, SqlBatch, "b"));
        }
        for i in 0..n {
            evs.push(ev("x", n + i, Completed, SqlBatch, ""));
        }
        let a = Activity::new("x", evs);
        let opts = TreeOptions { max_depth: 4, ..Default::default() };
        assert!(build_qqtree_with(&a, &opts).is_err());
        assert_eq!(build_qqtree(&a).unwrap().height(), 5);
    }

    #[test]
    fn exec_detection() {
        assert!(is_exec_text("  EXEC dbo.P 1"));
        assert!(is_exec_text("execute P"));
        assert!(!is_exec_text("EXECUTED"));
        assert!(!is_exec_text("SELECT 1"));
    }

    /// Random tree shape: each entry lists child counts in pre-order.
    fn arb_shape() -> impl Strategy<Value = Vec<Vec<usize>>> {
        // depth <= 6, fanout <= 5, via a recursive strategy over nested vectors
        let leaf = Just(Vec::<Vec<usize>>::new());
        leaf.prop_recursive(6, 200, 5, |inner| {
            prop::collection::vec(inner, 0..=5).prop_map(|kids| {
                let mut v = vec![vec![kids.len()]];
                for k in kids {
                    if k.is_empty() {
                        v.push(vec![0]);
                    } else {
                        v.extend(k);
                    }
                }
                v
            })
        })
    }

    /// Emits events for a pre-order child-count list; returns events and each
    /// node's (start seq, end seq).
    fn emit(shape: &[Vec<usize>]) -> (Vec<QueryEvent>, Vec<(u64, u64)>) {
        fn go(shape: &[Vec<usize>], pos: &mut usize, seq: &mut u64, evs: &mut Vec<QueryEvent>, iv: &mut Vec<(u64, u64)>) {
            let me = *pos;
            *pos += 1;
            let kids = shape.get(me).map_or(0, |v| v[0]);
            let class = if me == 0 { EventClass::SqlBatch } else { EventClass::SpStatement };
            let s = *seq;
            evs.push(ev("r", s, EventKind::Started, class, &format!("q{me}")));
            iv.push((s, 0));
            *seq += 1;
            for _ in 0..kids {
                go(shape, pos, seq, evs, iv);
            }
            evs.push(ev("r", *seq, EventKind::Completed, class, ""));
            iv[me].1 = *seq;
            *seq += 1;
        }
        let (mut evs, mut iv) = (vec![], vec![]);
        go(shape, &mut 0, &mut 0, &mut evs, &mut iv);
        (evs, iv)
    }

    proptest! {
        #[test]
        fn matches_interval_containment(shape in arb_shape()) {
            let shape = if shape.is_empty() { vec![vec![0]] } else { shape };
            let (evs, iv) = emit(&shape);
            let t = build_qqtree(&Activity::new("r", evs)).unwrap();
            // oracle: parent = tightest strictly containing interval
            let mut oracle_parent = vec![None; iv.len()];
            for (i, a) in iv.iter().enumerate() {
                let mut best: Option<usize> = None;
                for (j, b) in iv.iter().enumerate() {
                    if i != j && b.0 < a.0 && a.1 < b.1 && best.map_or(true, |k| iv[k].0 < b.0) {
                        best = Some(j);
                    }
                }
                oracle_parent[i] = best;
            }
            let mut built_parent = vec![None; iv.len()];
            let by_text = |n: &QQTreeNode| n.text()[1..].parse::<usize>().unwrap();
            let mut stack = vec![(&t.root, None::<usize>)];
            while let Some((n, p)) = stack.pop() {
                let me = by_text(n);
                built_parent[me] = p;
                let (s, e) = n.interval();
                for c in &n.children {
                    let (cs, ce) = c.interval();
                    prop_assert!(s < cs && ce < e);
                    stack.push((c, Some(me)));
                }
            }
            prop_assert_eq!(built_parent, oracle_parent);
            prop_assert_eq!(t.node_count(), iv.len());
        }
    }
}
