//! Hook points: places in the pipeline where registered functions run with
//! access to the state at that point.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::event::QueryEvent;
use crate::filters::Candidate;
use crate::graph::ProvenanceGraph;
use crate::provenance::StatementProvenance;
use crate::qqtree::{Activity, QQTree};
use crate::runtime::RuntimeExtract;
use crate::uploader::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    ActivityCollector,
    RuntimeExtractor,
    ProvenanceExtractor,
    Stitcher,
    Uploader,
}

/// Sub-stages; `Whole` is the component itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Whole,
    Download,
    Parse,
    Sort,
    BuildTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PointKind {
    /// Start of a (sub-)component.
    ComponentStart,
    /// End of a (sub-)component.
    ComponentEnd,
    /// Right before results go to the next component.
    PreSend,
    /// After sending, when control is back.
    PostSend,
    /// Right before the end of each iteration over items.
    PerItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookPoint {
    pub component: Component,
    pub stage: Stage,
    pub kind: PointKind,
}

impl HookPoint {
    pub const fn new(component: Component, stage: Stage, kind: PointKind) -> Self {
        HookPoint { component, stage, kind }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}/{:?}", self.component, self.stage, self.kind)
    }
}

/// State a hook may read and change.
pub enum Payload<'a> {
    None,
    Event(&'a mut QueryEvent),
    Activities(&'a mut Vec<Activity>),
    Tree(&'a mut QQTree),
    Candidates(&'a mut Vec<Candidate>),
    Runtime(&'a mut RuntimeExtract),
    Provenance(&'a mut BTreeMap<String, StatementProvenance>),
    Graph(&'a mut ProvenanceGraph),
    Batch(&'a mut Batch),
}

impl Payload<'_> {
    fn kind(&self) -> PayloadKind {
        match self {
            Payload::None => PayloadKind::None,
            Payload::Event(_) => PayloadKind::Event,
            Payload::Activities(_) => PayloadKind::Activities,
            Payload::Tree(_) => PayloadKind::Tree,
            Payload::Candidates(_) => PayloadKind::Candidates,
            Payload::Runtime(_) => PayloadKind::Runtime,
            Payload::Provenance(_) => PayloadKind::Provenance,
            Payload::Graph(_) => PayloadKind::Graph,
            Payload::Batch(_) => PayloadKind::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    None,
    Event,
    Activities,
    Tree,
    Candidates,
    Runtime,
    Provenance,
    Graph,
    Batch,
}

pub struct HookCtx<'a> {
    pub point: HookPoint,
    pub payload: Payload<'a>,
    /// Set to discard the current item (per-item points only).
    pub drop: bool,
}

pub type HookFn = Arc<dyn Fn(&mut HookCtx<'_>) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegistrationId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HookError {
    #[error("no hook point {0}")]
    UnknownPoint(String),
}

use Component::*;
use PointKind::*;
use Stage::*;

/// Every point the pipeline reaches, with the state it exposes. Per-item
/// points run on the pipeline thread in item order.
pub const POINTS: &[(HookPoint, PayloadKind)] = &[
    (HookPoint::new(ActivityCollector, Whole, ComponentStart), PayloadKind::None),
    (HookPoint::new(ActivityCollector, Download, ComponentStart), PayloadKind::None),
    (HookPoint::new(ActivityCollector, Download, ComponentEnd), PayloadKind::None),
    (HookPoint::new(ActivityCollector, Parse, ComponentStart), PayloadKind::None),
    (HookPoint::new(ActivityCollector, Parse, PerItem), PayloadKind::Event),
    (HookPoint::new(ActivityCollector, Parse, ComponentEnd), PayloadKind::Activities),
    (HookPoint::new(ActivityCollector, Sort, ComponentEnd), PayloadKind::Activities),
    (HookPoint::new(ActivityCollector, BuildTree, ComponentStart), PayloadKind::None),
    (HookPoint::new(ActivityCollector, BuildTree, PerItem), PayloadKind::Tree),
    (HookPoint::new(ActivityCollector, BuildTree, ComponentEnd), PayloadKind::Candidates),
    (HookPoint::new(ActivityCollector, Whole, PreSend), PayloadKind::Candidates),
    (HookPoint::new(ActivityCollector, Whole, PostSend), PayloadKind::None),
    (HookPoint::new(ActivityCollector, Whole, ComponentEnd), PayloadKind::None),
    (HookPoint::new(RuntimeExtractor, Whole, ComponentStart), PayloadKind::None),
    (HookPoint::new(RuntimeExtractor, Whole, PerItem), PayloadKind::Runtime),
    (HookPoint::new(RuntimeExtractor, Whole, ComponentEnd), PayloadKind::None),
    (HookPoint::new(ProvenanceExtractor, Whole, ComponentStart), PayloadKind::None),
    (HookPoint::new(ProvenanceExtractor, Whole, PerItem), PayloadKind::Provenance),
    (HookPoint::new(ProvenanceExtractor, Whole, ComponentEnd), PayloadKind::None),
    (HookPoint::new(Stitcher, Whole, ComponentStart), PayloadKind::None),
    (HookPoint::new(Stitcher, Whole, PerItem), PayloadKind::Graph),
    (HookPoint::new(Stitcher, Whole, PreSend), PayloadKind::Graph),
    (HookPoint::new(Stitcher, Whole, ComponentEnd), PayloadKind::None),
    (HookPoint::new(Uploader, Whole, ComponentStart), PayloadKind::None),
    (HookPoint::new(Uploader, Whole, PreSend), PayloadKind::Batch),
    (HookPoint::new(Uploader, Whole, PostSend), PayloadKind::Batch),
    (HookPoint::new(Uploader, Whole, ComponentEnd), PayloadKind::None),
];

pub fn payload_kind(point: HookPoint) -> Option<PayloadKind> {
    POINTS.iter().find(|(p, _)| *p == point).map(|(_, k)| *k)
}

/// Registered hooks. Built before a run and read-only during it.
#[derive(Clone, Default)]
pub struct HookRegistry {
    hooks: BTreeMap<HookPoint, Vec<(RegistrationId, HookFn)>>,
    next: usize,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts: BTreeMap<String, usize> = self.hooks.iter().map(|(p, v)| (p.to_string(), v.len())).collect();
        f.debug_struct("HookRegistry").field("hooks", &counts).finish()
    }
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_hook(
        &mut self,
        point: HookPoint,
        f: impl Fn(&mut HookCtx<'_>) + Send + Sync + 'static,
    ) -> Result<RegistrationId, HookError> {
        if payload_kind(point).is_none() {
            return Err(HookError::UnknownPoint(point.to_string()));
        }
        let id = RegistrationId(self.next);
        self.next += 1;
        self.hooks.entry(point).or_default().push((id, Arc::new(f)));
        Ok(id)
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn has(&self, point: HookPoint) -> bool {
        self.hooks.get(&point).is_some_and(|v| !v.is_empty())
    }

    /// Runs the point's functions in registration order. Returns true when one
    /// of them asked to drop the item.
    pub fn run(&self, point: HookPoint, payload: Payload<'_>) -> bool {
        let Some(fs) = self.hooks.get(&point) else { return false };
        debug_assert_eq!(payload_kind(point), Some(payload.kind()), "payload mismatch at {point}");
        let mut ctx = HookCtx { point, payload, drop: false };
        for (_, f) in fs {
            f(&mut ctx);
        }
        ctx.drop
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn unknown_point_is_rejected() {
        let mut r = HookRegistry::new();
        let bogus = HookPoint::new(Uploader, Parse, PerItem);
        assert!(matches!(r.register_hook(bogus, |_| {}), Err(HookError::UnknownPoint(_))));
        assert!(r.register_hook(POINTS[0].0, |_| {}).is_ok());
    }

    #[test]
    fn same_point_runs_in_registration_order() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let mut r = HookRegistry::new();
        let point = HookPoint::new(Stitcher, Whole, ComponentEnd);
        for tag in ["a", "b", "c"] {
            let log = log.clone();
            r.register_hook(point, move |_| log.lock().unwrap().push(tag)).unwrap();
        }
        r.run(point, Payload::None);
        r.run(point, Payload::None);
        assert_eq!(*log.lock().unwrap(), ["a", "b", "c", "a", "b", "c"]);
    }

    #[test]
    fn drop_flag_and_mutation() {
        let mut r = HookRegistry::new();
        let point = HookPoint::new(ActivityCollector, Parse, PerItem);
        r.register_hook(point, |ctx| {
            if let Payload::Event(e) = &mut ctx.payload {
                e.metadata.username = "rewritten".into();
                ctx.drop = e.seq == 1;
            }
        })
        .unwrap();
        let mut e = crate::qqtree::testutil::ev("a", 0, crate::event::EventKind::Started, crate::event::EventClass::SqlBatch, "x");
        assert!(!r.run(point, Payload::Event(&mut e)));
        assert_eq!(e.metadata.username, "rewritten");
        e.seq = 1;
        assert!(r.run(point, Payload::Event(&mut e)));
    }

    #[test]
    fn points_are_unique() {
        let mut seen = std::collections::HashSet::new();
        assert!(POINTS.iter().all(|(p, _)| seen.insert(*p)));
    }
}
