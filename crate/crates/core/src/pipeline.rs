//! One extraction run: collect, build trees, filter, extract, stitch,
//! aggregate and upload.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::catalog::{CatalogSet, StateError};
use crate::collector::{collect_with, load_checkpoint, save_checkpoint, Checkpoint, CollectError, CollectOptions, DirSource, LogSource};
use crate::config::Config;
use crate::filters::{
    admit_last_k_runs, drop_aggregation_levels, filter_activity, loop_compress, route_tree, Candidate, FilterError,
    Filters, Verdict,
};
use crate::graph::ProvenanceGraph;
use crate::hooks::{Component, HookPoint, HookRegistry, Payload, PointKind, Stage as HStage};
use crate::provenance::{extract_provenance, generate_script};
use crate::qqtree::build_qqtree;
use crate::report::{RunReport, Stage};
use crate::runtime::{extract_runtime, extract_runtime_into, NodeEntities, RuntimeExtract};
use crate::stitcher::{aggregate_across_runs, stitch_onto, stitch_owned, StitchOptions};
use crate::uploader::{
    compile_graph, graph_to_json, partition_batches, upload, FileSink, HttpSink, RetryPolicy, Sink, UploadCheckpoint,
    UploadError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Upload(#[from] UploadError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

/// Everything carried from one run to the next.
#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    pub checkpoint: Checkpoint,
    pub catalog: CatalogSet,
    pub upload: UploadCheckpoint,
}

impl PipelineState {
    pub fn load(cfg: &Config) -> Result<Self, PipelineError> {
        Ok(PipelineState {
            checkpoint: load_checkpoint(&cfg.source.checkpoint)?,
            catalog: CatalogSet::load(&cfg.source.catalog)?,
            upload: UploadCheckpoint::load(&cfg.uploader.checkpoint)?,
        })
    }

    /// The upload checkpoint is saved by the uploader itself.
    pub fn save(&self, cfg: &Config) -> Result<(), PipelineError> {
        ensure_parent(&cfg.source.checkpoint)?;
        save_checkpoint(&cfg.source.checkpoint, &self.checkpoint)?;
        ensure_parent(&cfg.source.catalog)?;
        self.catalog.save(&cfg.source.catalog)?;
        Ok(())
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Wall clock in microseconds; `None` reads the system clock.
    pub now: Option<i64>,
    pub hooks: Option<&'a HookRegistry>,
    /// Where the uploader persists its progress.
    pub upload_checkpoint: Option<&'a Path>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub graph: ProvenanceGraph,
}

pub fn now_us() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as i64)
        .unwrap_or(0)
}

fn ensure_parent(p: &Path) -> Result<(), PipelineError> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d)
            .map_err(|e| PipelineError::Io { path: d.display().to_string(), reason: e.to_string() }),
        _ => Ok(()),
    }
}

/// `http(s)://` endpoints post to a bulk API; anything else is a directory.
pub fn make_sink(target: &str) -> Option<Box<dyn Sink>> {
    if target.is_empty() {
        None
    } else if target.starts_with("http://") || target.starts_with("https://") {
        Some(Box::new(HttpSink::new(target)))
    } else {
        Some(Box::new(FileSink::new(target)))
    }
}

struct Hooks<'a>(Option<&'a HookRegistry>);

enum Runtime {
    Direct(BTreeMap<String, NodeEntities>),
    Owned(RuntimeExtract),
    Dropped,
}

impl Hooks<'_> {
    fn run(&self, c: Component, s: HStage, k: PointKind, p: Payload<'_>) -> bool {
        match self.0 {
            Some(r) => r.run(HookPoint::new(c, s, k), p),
            None => false,
        }
    }

    fn mark(&self, c: Component, s: HStage, k: PointKind) {
        self.run(c, s, k, Payload::None);
    }

    fn has(&self, c: Component, s: HStage, k: PointKind) -> bool {
        self.0.is_some_and(|r| r.has(HookPoint::new(c, s, k)))
    }
}

/// Runs the pipeline against `source`, reading and advancing `state`. State
/// changes only when the whole run, upload included, succeeds.
pub fn run_pipeline(
    cfg: &Config,
    source: &dyn LogSource,
    state: &mut PipelineState,
    opts: &RunOptions<'_>,
) -> Result<RunOutput, PipelineError> {
    use Component::*;
    use HStage::*;
    use PointKind::*;

    let total = Instant::now();
    let hooks = Hooks(opts.hooks);
    let mut report = RunReport::default();
    let t = Instant::now();
    let filters = Filters::new(cfg.filters.clone())?;
    report.stages.add(Stage::Filter, t.elapsed());
    let now = opts.now.unwrap_or_else(now_us);

    // ---- activity collector ----
    hooks.mark(ActivityCollector, Whole, ComponentStart);
    hooks.mark(ActivityCollector, Download, ComponentStart);
    let copts = CollectOptions {
        staleness_horizon_us: cfg.source.staleness_horizon_us,
        retain_plan_payloads: cfg.source.retain_plan_payloads,
    };
    let per_event = HookPoint::new(ActivityCollector, Parse, PerItem);
    let mut keep = |e: &mut crate::event::QueryEvent| match opts.hooks {
        Some(r) if r.has(per_event) => !r.run(per_event, Payload::Event(e)),
        _ => true,
    };
    let t = Instant::now();
    let out = collect_with(source, &state.checkpoint, now, &copts, &mut keep)?;
    let collect_time = t.elapsed();
    let st = &out.stats;
    report.stages.add(Stage::LgRead, st.read_time);
    // grouping and sorting belong to parsing
    report.stages.add(Stage::LgPars, collect_time.saturating_sub(st.read_time));
    report.counts.files = st.files;
    report.counts.bytes = st.bytes;
    report.counts.events = st.events;
    report.counts.activities_skipped = st.skipped_processed;
    report.counts.activities_deferred = st.deferred;
    let next_checkpoint = out.checkpoint;
    let mut activities = out.activities;
    hooks.mark(ActivityCollector, Download, ComponentEnd);
    hooks.mark(ActivityCollector, Parse, ComponentStart);
    hooks.run(ActivityCollector, Parse, ComponentEnd, Payload::Activities(&mut activities));
    hooks.run(ActivityCollector, Sort, ComponentEnd, Payload::Activities(&mut activities));
    report.counts.activities_collected = activities.len();

    hooks.mark(ActivityCollector, BuildTree, ComponentStart);
    let mut candidates = Vec::new();
    let mut qqt_time = Duration::ZERO;
    let mut filter_time = Duration::ZERO;
    for a in activities {
        let t = Instant::now();
        let built = build_qqtree(&a);
        let mut tree = match built {
            Ok(tree) => tree,
            Err(e) => {
                qqt_time += t.elapsed();
                report.counts.activities_errored += 1;
                report.diagnose(e.to_string());
                continue;
            }
        };
        let dropped = hooks.run(ActivityCollector, BuildTree, PerItem, Payload::Tree(&mut tree));
        qqt_time += t.elapsed();
        if dropped {
            report.counts.activities_filtered += 1;
            continue;
        }
        let t = Instant::now();
        let order = a.order_key();
        let routed = route_tree(tree, &filters);
        let kept = routed.and_then(|tree| match filter_activity(&tree, &a.events, &filters) {
            Verdict::Keep => Some(tree),
            Verdict::Drop(_) => None,
        });
        drop(a);
        filter_time += t.elapsed();
        match kept {
            Some(tree) => candidates.push(Candidate { order, tree }),
            None => report.counts.activities_filtered += 1,
        }
    }
    hooks.run(ActivityCollector, BuildTree, ComponentEnd, Payload::Candidates(&mut candidates));

    let t = Instant::now();
    let before = candidates.len();
    let admitted = admit_last_k_runs(candidates, cfg.filters.sp_runs_admitted, cfg.filters.keep_context);
    report.counts.activities_not_admitted = before - admitted.len();
    let mut candidates: Vec<Candidate> = admitted
        .into_iter()
        .map(|c| Candidate { order: c.order, tree: loop_compress(c.tree, cfg.filters.loop_iters_admitted) })
        .collect();
    filter_time += t.elapsed();
    report.stages.add(Stage::Qqt, qqt_time);

    hooks.run(ActivityCollector, Whole, PreSend, Payload::Candidates(&mut candidates));
    hooks.mark(ActivityCollector, Whole, PostSend);
    hooks.mark(ActivityCollector, Whole, ComponentEnd);
    report.stages.add(Stage::Filter, filter_time);

    // ---- per-activity extraction ----
    let popts = cfg.binding.provenance_options();
    let sopts = StitchOptions { emit_column_entities: cfg.binding.emit_column_entities };
    let mut catalog = state.catalog.clone();
    let mut graph = ProvenanceGraph::new();
    let (mut rinfo, mut provex, mut stitch) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
    hooks.mark(RuntimeExtractor, Whole, ComponentStart);
    hooks.mark(ProvenanceExtractor, Whole, ComponentStart);
    hooks.mark(Stitcher, Whole, ComponentStart);
    let direct = !hooks.has(RuntimeExtractor, Whole, PerItem)
        && !hooks.has(ProvenanceExtractor, Whole, PerItem)
        && !hooks.has(Stitcher, Whole, PerItem);
    for c in &candidates {
        let tree = &c.tree;
        report.counts.tree_nodes += tree.node_count();

        // without per-activity hooks, entities go straight into the run graph
        let t = Instant::now();
        let runtime = if direct {
            extract_runtime_into(&mut graph, tree).map(|node_map| Runtime::Direct(node_map))
        } else {
            extract_runtime(tree).map(|mut r| match hooks.run(RuntimeExtractor, Whole, PerItem, Payload::Runtime(&mut r)) {
                true => Runtime::Dropped,
                false => Runtime::Owned(r),
            })
        };
        rinfo += t.elapsed();
        let runtime = match runtime {
            Ok(Runtime::Dropped) => continue,
            Ok(r) => r,
            Err(e) => {
                report.counts.activities_errored += 1;
                report.diagnose(e.to_string());
                continue;
            }
        };

        let t = Instant::now();
        let md = &tree.root.started.metadata;
        let state_db = catalog.get_or_create(&md.server_name, &md.database_name);
        let script = generate_script(tree);
        let mut prov = extract_provenance(&script, state_db, &popts);
        report.counts.statements_analyzed += prov.len();
        for p in prov.values() {
            for d in &p.diagnostics {
                report.diagnose(format!("activity {} node {}: {d}", tree.activity_id, p.node_id));
            }
        }
        let dropped = hooks.run(ProvenanceExtractor, Whole, PerItem, Payload::Provenance(&mut prov));
        provex += t.elapsed();
        if dropped {
            continue;
        }

        let t = Instant::now();
        let merged = match runtime {
            Runtime::Direct(node_map) => stitch_onto(&mut graph, &node_map, &prov, tree, &sopts).map(|()| true),
            Runtime::Owned(r) => stitch_owned(r, &prov, tree, &sopts).and_then(|mut g| {
                if hooks.run(Stitcher, Whole, PerItem, Payload::Graph(&mut g)) {
                    return Ok(false);
                }
                graph.merge(g)?;
                Ok(true)
            }),
            Runtime::Dropped => unreachable!("dropped runs are skipped above"),
        };
        match merged {
            Ok(true) => report.counts.activities_processed += 1,
            Ok(false) => {}
            Err(e) => {
                report.counts.activities_errored += 1;
                report.diagnose(format!("activity {}: {e}", tree.activity_id));
            }
        }
        stitch += t.elapsed();
    }
    drop(candidates);
    hooks.mark(RuntimeExtractor, Whole, ComponentEnd);
    hooks.mark(ProvenanceExtractor, Whole, ComponentEnd);
    report.stages.add(Stage::RInfo, rinfo);
    report.stages.add(Stage::ProvEx, provex);
    report.stages.add(Stage::Stitcher, stitch);

    let t = Instant::now();
    let graph = aggregate_across_runs(graph);
    let mut graph = drop_aggregation_levels(graph, &cfg.filters.emit_levels);
    hooks.run(Stitcher, Whole, PreSend, Payload::Graph(&mut graph));
    hooks.mark(Stitcher, Whole, ComponentEnd);
    report.stages.add(Stage::Aggregate, t.elapsed());
    report.graph_entities = graph.entity_count();
    report.graph_relationships = graph.relationship_count();

    // ---- uploader ----
    let t = Instant::now();
    hooks.mark(Uploader, Whole, ComponentStart);
    let graph_out = &cfg.uploader.graph_out;
    if !graph_out.as_os_str().is_empty() {
        let text = graph_to_json(&graph)?;
        ensure_parent(graph_out)?;
        std::fs::write(graph_out, text)
            .map_err(|e| PipelineError::Io { path: graph_out.display().to_string(), reason: e.to_string() })?;
    }
    let mut upload_cp = state.upload.clone();
    if let Some(mut sink) = make_sink(&cfg.uploader.sink) {
        let docs = compile_graph(&graph, cfg.uploader.target_format)?;
        let mut batches = partition_batches(&docs, cfg.uploader.batch_size);
        drop(docs);
        for b in &mut batches {
            hooks.run(Uploader, Whole, PreSend, Payload::Batch(b));
        }
        let policy = RetryPolicy {
            base: Duration::from_millis(cfg.uploader.retry_base_ms),
            factor: 2,
            max_attempts: cfg.uploader.max_attempts,
        };
        if let Some(p) = opts.upload_checkpoint {
            ensure_parent(p)?;
        }
        let result = upload(sink.as_mut(), &batches, &mut upload_cp, &policy, opts.upload_checkpoint);
        // partial progress survives a failed upload
        state.upload = upload_cp;
        report.upload = Some(result?);
        for b in &mut batches {
            hooks.run(Uploader, Whole, PostSend, Payload::Batch(b));
        }
    }
    hooks.mark(Uploader, Whole, ComponentEnd);
    state.checkpoint = next_checkpoint;
    state.catalog = catalog;
    report.stages.add(Stage::Upload, t.elapsed());
    report.total_secs = total.elapsed().as_secs_f64();
    Ok(RunOutput { report, graph })
}

/// Runs against the configured log directory and persists state, the graph
/// and the report.
pub fn run_extract(cfg: &Config, opts: &RunOptions<'_>) -> Result<RunOutput, PipelineError> {
    let t = Instant::now();
    let mut state = PipelineState::load(cfg)?;
    let load_time = t.elapsed();
    let source = DirSource::new(&cfg.source.log_dir);
    let upload_cp = opts.upload_checkpoint.unwrap_or(&cfg.uploader.checkpoint);
    let run_opts = RunOptions { now: opts.now, hooks: opts.hooks, upload_checkpoint: Some(upload_cp) };
    let mut out = run_pipeline(cfg, &source, &mut state, &run_opts)?;
    let t = Instant::now();
    state.save(cfg)?;
    let save_time = t.elapsed();
    let r = &mut out.report;
    r.stages.add(Stage::LgRead, load_time);
    r.stages.add(Stage::Upload, save_time);
    r.total_secs += (load_time + save_time).as_secs_f64();
    if !cfg.uploader.report.as_os_str().is_empty() {
        ensure_parent(&cfg.uploader.report)?;
        r.save(&cfg.uploader.report)
            .map_err(|e| PipelineError::Io { path: cfg.uploader.report.display().to_string(), reason: e.to_string() })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{Admit, FilterConfig};
    use crate::graph::EntityType;
    use crate::workload::{gen_running_example, GraphTruth};
    use std::sync::{Arc, Mutex};

    fn unfiltered() -> Config {
        Config { filters: FilterConfig::default(), ..Default::default() }
    }

    fn no_files(mut c: Config) -> Config {
        c.uploader.graph_out = Default::default();
        c
    }

    #[test]
    fn running_example_matches_truth() {
        let log = gen_running_example(2, 1).unwrap();
        let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
        let out = run_pipeline(&no_files(unfiltered()), &log.source(), &mut state, &RunOptions::default()).unwrap();
        assert_eq!(out.report.counts.activities_processed, 1, "{:?}", out.report);
        let truth = log.truth.as_ref().unwrap();
        assert_eq!(GraphTruth::of(&out.graph).diff(&truth.graph, 10), Vec::<String>::new());
        assert!(out.graph.by_name("ds://srv/sales/dbo/SalesHistory").is_some());
    }

    #[test]
    fn stage_times_cover_total() {
        let log = gen_running_example(2, 50).unwrap();
        let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
        let r = run_pipeline(&no_files(Config::default()), &log.source(), &mut state, &RunOptions::default())
            .unwrap()
            .report;
        assert!((r.total_secs - r.stages.sum()).abs() <= 0.05 * r.total_secs + 1e-3, "{r:?}");
    }

    #[test]
    fn second_run_skips_processed() {
        let log = gen_running_example(2, 3).unwrap();
        let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
        let cfg = no_files(unfiltered());
        let a = run_pipeline(&cfg, &log.source(), &mut state, &RunOptions::default()).unwrap();
        assert!(a.report.counts.activities_processed > 0);
        let b = run_pipeline(&cfg, &log.source(), &mut state, &RunOptions::default()).unwrap();
        assert_eq!(b.report.counts.activities_processed, 0);
        assert!(b.graph.is_empty());
    }

    #[test]
    fn last_k_limits_processed() {
        let log = gen_running_example(2, 5).unwrap();
        let mut cfg = no_files(unfiltered());
        cfg.filters.sp_runs_admitted = Admit::Last(1);
        cfg.filters.keep_context = false;
        let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
        let out = run_pipeline(&cfg, &log.source(), &mut state, &RunOptions::default()).unwrap();
        assert!(out.report.counts.activities_not_admitted > 0);
        assert!(out.report.counts.activities_processed < 10);
    }

    #[test]
    fn hooks_fire_and_can_drop() {
        let log = gen_running_example(2, 1).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let mut reg = HookRegistry::new();
        for (p, _) in crate::hooks::POINTS {
            let seen = seen.clone();
            let p = *p;
            reg.register_hook(p, move |_| seen.lock().unwrap().push(p)).unwrap();
        }
        reg.register_hook(HookPoint::new(Component::Stitcher, HStage::Whole, PointKind::PerItem), |ctx| {
            ctx.drop = true;
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = no_files(unfiltered());
        cfg.uploader.sink = dir.path().join("out").display().to_string();
        let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
        let opts = RunOptions { hooks: Some(&reg), ..Default::default() };
        let out = run_pipeline(&cfg, &log.source(), &mut state, &opts).unwrap();
        assert!(out.graph.is_empty());
        assert_eq!(out.report.counts.activities_processed, 0);
        let seen = seen.lock().unwrap();
        let first = |p: HookPoint| seen.iter().position(|x| *x == p);
        let start = first(HookPoint::new(Component::ActivityCollector, HStage::Whole, PointKind::ComponentStart));
        let end = first(HookPoint::new(Component::Uploader, HStage::Whole, PointKind::ComponentEnd));
        assert_eq!(start, Some(0));
        assert_eq!(end, Some(seen.len() - 1));
        assert!(seen.iter().filter(|p| p.kind == PointKind::PerItem).count() >= 10);
    }

    #[test]
    fn direct_path_matches_hooked_path() {
        let params = crate::workload::OltpParams { transactions: 60, ..Default::default() };
        let log = crate::workload::gen_oltp(&params).unwrap();
        let mut reg = HookRegistry::new();
        reg.register_hook(HookPoint::new(Component::Stitcher, HStage::Whole, PointKind::PerItem), |_| {}).unwrap();
        let cfg = no_files(unfiltered());
        let run = |hooks| {
            let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
            run_pipeline(&cfg, &log.source(), &mut state, &RunOptions { hooks, ..Default::default() }).unwrap()
        };
        let (a, b) = (run(None), run(Some(&reg)));
        assert_eq!(a.report.counts, b.report.counts);
        assert!(a.report.counts.activities_processed > 0);
        let ents = |g: &ProvenanceGraph| {
            let mut v: Vec<_> = g.entities().cloned().collect();
            v.sort_by(|x, y| x.qualified_name.cmp(&y.qualified_name));
            v
        };
        let rels = |g: &ProvenanceGraph| {
            let mut v: Vec<_> = g.relationships().cloned().collect();
            v.sort();
            v
        };
        assert_eq!(ents(&a.graph), ents(&b.graph));
        assert_eq!(rels(&a.graph), rels(&b.graph));
    }

    #[test]
    fn failed_upload_keeps_state() {
        let log = gen_running_example(2, 1).unwrap();
        let mut cfg = no_files(unfiltered());
        cfg.uploader.sink = "http://127.0.0.1:9".into();
        cfg.uploader.retry_base_ms = 1;
        cfg.uploader.max_attempts = 2;
        let mut state = PipelineState { catalog: log.catalog.clone(), ..Default::default() };
        let before = state.checkpoint.clone();
        assert!(matches!(
            run_pipeline(&cfg, &log.source(), &mut state, &RunOptions::default()),
            Err(PipelineError::Upload(UploadError::SinkUnavailable { .. }))
        ));
        assert_eq!(state.checkpoint, before);
    }

    #[test]
    fn run_extract_persists() {
        let log = gen_running_example(2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        log.write_dir(&dir.path().join("logs"), 4).unwrap();
        log.catalog.save(&dir.path().join("catalog.json")).unwrap();
        let text = "[source]\ncatalog = \"catalog.json\"\n[uploader]\nsink = \"batches\"\n";
        std::fs::write(dir.path().join("logprov.toml"), text).unwrap();
        let cfg = Config::load(&dir.path().join("logprov.toml")).unwrap();
        let out = run_extract(&cfg, &RunOptions::default()).unwrap();
        assert!(out.graph.entities().any(|e| e.entity_type == EntityType::StoredProcedure));
        assert!(dir.path().join("state/checkpoint.json").exists());
        assert!(dir.path().join("state/last_report.json").exists());
        assert!(dir.path().join("out/graph.json").exists());
        assert!(dir.path().join("batches/batch-1.json").exists());
        let again = run_extract(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(again.report.counts.activities_processed, 0);
    }
}
