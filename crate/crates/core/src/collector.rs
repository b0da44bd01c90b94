//! Incremental log reading, activity grouping and checkpointing.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::event::{parse_event_line, parse_log_file_name, EventError, EventKind, QueryEvent};
use crate::qqtree::Activity;

pub const DAY_US: i64 = 24 * 3600 * 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum CollectError {
    #[error("log source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("{file}:{line}: {source}")]
    MalformedRecord { file: String, line: usize, source: EventError },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },
    #[error("checkpoint write failed: {0}")]
    CheckpointWrite(#[from] io::Error),
}

/// A named chunk of NDJSON.
pub struct LogFile {
    pub name: String,
    pub content: String,
}

pub trait LogSource {
    /// All log files, in partition / first-seq order.
    fn read_all(&self) -> Result<Vec<LogFile>, CollectError>;
}

/// Reads `events-*.ndjson` files from a directory.
pub struct DirSource {
    pub dir: PathBuf,
}

impl DirSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirSource { dir: dir.into() }
    }

    pub fn list(&self) -> Result<Vec<PathBuf>, CollectError> {
        let rd = fs::read_dir(&self.dir)
            .map_err(|e| CollectError::SourceUnavailable(format!("{}: {e}", self.dir.display())))?;
        let mut files = Vec::new();
        for entry in rd {
            let entry = entry.map_err(|e| CollectError::SourceUnavailable(e.to_string()))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(key) = parse_log_file_name(&name) {
                files.push((key, entry.path()));
            }
        }
        files.sort();
        Ok(files.into_iter().map(|(_, p)| p).collect())
    }
}

impl LogSource for DirSource {
    fn read_all(&self) -> Result<Vec<LogFile>, CollectError> {
        self.list()?
            .into_iter()
            .map(|p| {
                let content = fs::read_to_string(&p)
                    .map_err(|e| CollectError::SourceUnavailable(format!("{}: {e}", p.display())))?;
                Ok(LogFile { name: p.file_name().unwrap().to_string_lossy().into_owned(), content })
            })
            .collect()
    }
}

/// In-memory files, for tests and generated logs.
#[derive(Default, Clone)]
pub struct MemorySource {
    pub files: Vec<(String, String)>,
}

impl MemorySource {
    pub fn single(content: String) -> Self {
        MemorySource { files: vec![(crate::event::log_file_name(0, 0), content)] }
    }
}

impl LogSource for MemorySource {
    fn read_all(&self) -> Result<Vec<LogFile>, CollectError> {
        Ok(self.files.iter().map(|(n, c)| LogFile { name: n.clone(), content: c.clone() }).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub last_run_start: i64,
    /// `(activity_id, fingerprint)` pairs already yielded.
    pub processed: BTreeSet<(String, String)>,
    /// Activities seen open at the end of a run.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub deferred: BTreeSet<String>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CollectError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Checkpoint::default()),
        Err(e) => {
            return Err(CollectError::CorruptCheckpoint { path: path.display().to_string(), reason: e.to_string() })
        }
    };
    serde_json::from_str(&text)
        .map_err(|e| CollectError::CorruptCheckpoint { path: path.display().to_string(), reason: e.to_string() })
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), CollectError> {
    write_atomic(path, serde_json::to_string_pretty(cp).expect("checkpoint serializes").as_bytes())?;
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Hash of the activity's `(timestamp, seq)` keys.
pub fn fingerprint(events: &[QueryEvent]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(e.timestamp.to_le_bytes());
        h.update(e.seq.to_le_bytes());
    }
    let d = h.finalize();
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CollectOptions {
    /// Open activities older than this are yielded anyway so tree building
    /// reports them.
    pub staleness_horizon_us: i64,
    /// Plan payloads are never interpreted; by default their bodies are
    /// released right after parsing.
    pub retain_plan_payloads: bool,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions { staleness_horizon_us: DAY_US, retain_plan_payloads: false }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CollectStats {
    pub files: usize,
    pub bytes: usize,
    pub events: usize,
    pub read_time: Duration,
    pub parse_time: Duration,
    pub group_time: Duration,
    pub skipped_processed: usize,
    pub deferred: usize,
    pub stale: usize,
}

#[derive(Debug)]
pub struct CollectOutput {
    /// Sorted by trigger time, then first seq.
    pub activities: Vec<Activity>,
    pub checkpoint: Checkpoint,
    pub stats: CollectStats,
}

pub fn collect(source: &dyn LogSource, cp: &Checkpoint, now: i64) -> Result<CollectOutput, CollectError> {
    collect_with(source, cp, now, &CollectOptions::default(), &mut |_| true)
}

/// `keep_event` sees every parsed event and may rewrite it; returning false
/// discards it before grouping.
pub fn collect_with(
    source: &dyn LogSource,
    cp: &Checkpoint,
    now: i64,
    opts: &CollectOptions,
    keep_event: &mut dyn FnMut(&mut QueryEvent) -> bool,
) -> Result<CollectOutput, CollectError> {
    let mut stats = CollectStats::default();

    let t = Instant::now();
    let files = source.read_all()?;
    stats.read_time = t.elapsed();
    stats.files = files.len();

    let t = Instant::now();
    let mut groups: HashMap<String, Vec<QueryEvent>> = HashMap::new();
    let mut max_ts = i64::MIN;
    for f in &files {
        stats.bytes += f.content.len();
        let mut last: Option<(i64, u64)> = None;
        for (i, line) in f.content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e = parse_event_line(line)
                .map_err(|source| CollectError::MalformedRecord { file: f.name.clone(), line: i + 1, source })?;
            if last.is_some_and(|k| k >= e.order_key()) {
                return Err(CollectError::MalformedRecord {
                    file: f.name.clone(),
                    line: i + 1,
                    source: EventError::InvariantViolation(vec!["(ts, seq) not increasing within file".into()]),
                });
            }
            last = Some(e.order_key());
            if !opts.retain_plan_payloads {
                if let Some(p) = e.plan_payload.as_mut() {
                    *p = String::new();
                }
            }
            stats.events += 1;
            max_ts = max_ts.max(e.timestamp);
            if keep_event(&mut e) {
                match groups.get_mut(&e.activity_id) {
                    Some(v) => v.push(e),
                    None => {
                        groups.insert(e.activity_id.clone(), vec![e]);
                    }
                }
            }
        }
    }
    drop(files);
    stats.parse_time = t.elapsed();

    let t = Instant::now();
    let mut next = Checkpoint {
        // the log's own clock bounds the watermark so that late appends with
        // timestamps below the wall clock are still picked up
        last_run_start: cp.last_run_start.max(now.min(max_ts)),
        processed: BTreeSet::new(),
        deferred: BTreeSet::new(),
    };
    let mut activities = Vec::new();
    for (id, mut events) in groups {
        let is_candidate = cp.deferred.contains(&id) || events.iter().any(|e| e.timestamp > cp.last_run_start);
        if !is_candidate {
            continue;
        }
        events.sort_unstable_by_key(QueryEvent::order_key);
        let fp = fingerprint(&events);
        let key = (id, fp);
        if cp.processed.contains(&key) {
            stats.skipped_processed += 1;
            next.processed.insert(key);
            continue;
        }
        if is_open(&events) {
            if now - events[0].timestamp <= opts.staleness_horizon_us {
                stats.deferred += 1;
                next.deferred.insert(key.0);
                continue;
            }
            stats.stale += 1;
        }
        let a = Activity::new(key.0.clone(), events);
        next.processed.insert(key);
        activities.push(a);
    }
    activities.sort_by_key(Activity::order_key);
    stats.group_time = t.elapsed();

    Ok(CollectOutput { activities, checkpoint: next, stats })
}

/// True when started events outnumber completions and the nesting never
/// went negative, i.e. the activity is still running.
fn is_open(events: &[QueryEvent]) -> bool {
    let mut depth: i64 = 0;
    for e in events.iter().filter(|e| !e.is_plan_profile()) {
        depth += if e.kind == EventKind::Started { 1 } else { -1 };
        if depth < 0 {
            return false;
        }
    }
    depth > 0
}
