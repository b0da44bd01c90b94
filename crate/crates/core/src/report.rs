//! Run reports: stage timings, counts and diagnostics of one extraction run.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::uploader::UploadReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    LgRead,
    LgPars,
    #[serde(rename = "QQT")]
    Qqt,
    Filter,
    RInfo,
    ProvEx,
    Stitcher,
    Aggregate,
    Upload,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::LgRead,
        Stage::LgPars,
        Stage::Qqt,
        Stage::Filter,
        Stage::RInfo,
        Stage::ProvEx,
        Stage::Stitcher,
        Stage::Aggregate,
        Stage::Upload,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::LgRead => "LgRead",
            Stage::LgPars => "LgPars",
            Stage::Qqt => "QQT",
            Stage::Filter => "Filter",
            Stage::RInfo => "RInfo",
            Stage::ProvEx => "ProvEx",
            Stage::Stitcher => "Stitcher",
            Stage::Aggregate => "Aggregate",
            Stage::Upload => "Upload",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    secs: [f64; 9],
}

impl StageTimes {
    pub fn add(&mut self, s: Stage, d: Duration) {
        self.secs[s as usize] += d.as_secs_f64();
    }

    pub fn get(&self, s: Stage) -> f64 {
        self.secs[s as usize]
    }

    pub fn sum(&self) -> f64 {
        self.secs.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub files: usize,
    pub bytes: usize,
    pub events: usize,
    pub activities_collected: usize,
    /// Already processed in an earlier run.
    pub activities_skipped: usize,
    /// Still open; retried next run.
    pub activities_deferred: usize,
    pub activities_errored: usize,
    pub activities_filtered: usize,
    pub activities_not_admitted: usize,
    pub activities_processed: usize,
    pub tree_nodes: usize,
    pub statements_analyzed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total_secs: f64,
    pub stages: StageTimes,
    pub counts: RunCounts,
    pub graph_entities: usize,
    pub graph_relationships: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upload: Option<UploadReport>,
    pub diagnostics_total: usize,
    /// The first diagnostics, capped.
    pub diagnostics: Vec<String>,
}

pub const MAX_DIAGNOSTICS: usize = 200;

impl RunReport {
    pub fn diagnose(&mut self, msg: impl Into<String>) {
        self.diagnostics_total += 1;
        if self.diagnostics.len() < MAX_DIAGNOSTICS {
            self.diagnostics.push(msg.into());
        }
    }

    pub fn graph_size(&self) -> usize {
        self.graph_entities + self.graph_relationships
    }

    pub fn load(path: &Path) -> std::io::Result<RunReport> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        crate::collector::write_atomic(path, serde_json::to_string_pretty(self).expect("report serializes").as_bytes())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let total = self.total_secs.max(f64::EPSILON);
        writeln!(s, "stage         seconds   share").unwrap();
        for st in Stage::ALL {
            let v = self.stages.get(st);
            writeln!(s, "{:<12} {:>8.3} {:>6.1}%", st.label(), v, 100.0 * v / total).unwrap();
        }
        writeln!(s, "{:<12} {:>8.3}", "total", self.total_secs).unwrap();
        let c = &self.counts;
        writeln!(s).unwrap();
        writeln!(s, "files {}  bytes {}  events {}", c.files, c.bytes, c.events).unwrap();
        writeln!(
            s,
            "activities: collected {}  skipped {}  deferred {}  errored {}  filtered {}  not admitted {}  processed {}",
            c.activities_collected,
            c.activities_skipped,
            c.activities_deferred,
            c.activities_errored,
            c.activities_filtered,
            c.activities_not_admitted,
            c.activities_processed
        )
        .unwrap();
        writeln!(s, "tree nodes {}  statements analyzed {}", c.tree_nodes, c.statements_analyzed).unwrap();
        writeln!(s, "graph: {} entities, {} relationships", self.graph_entities, self.graph_relationships).unwrap();
        if let Some(u) = &self.upload {
            writeln!(s, "upload: delivered {:?} skipped {:?} failed {:?}", u.delivered, u.skipped, u.failed).unwrap();
        }
        if self.diagnostics_total > 0 {
            writeln!(s, "\n{} diagnostics:", self.diagnostics_total).unwrap();
            for d in &self.diagnostics {
                writeln!(s, "  {d}").unwrap();
            }
            if self.diagnostics_total > self.diagnostics.len() {
                writeln!(s, "  ... {} more", self.diagnostics_total - self.diagnostics.len()).unwrap();
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnostics_are_capped() {
        let mut r = RunReport::default();
        for i in 0..MAX_DIAGNOSTICS + 5 {
            r.diagnose(format!("d{i}"));
        }
        assert_eq!(r.diagnostics.len(), MAX_DIAGNOSTICS);
        assert_eq!(r.diagnostics_total, MAX_DIAGNOSTICS + 5);
        assert!(r.render().contains("... 5 more"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunReport { total_secs: 1.5, graph_entities: 3, ..Default::default() };
        r.stages.add(Stage::Qqt, Duration::from_millis(250));
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        let back = RunReport::load(&p).unwrap();
        assert_eq!(back, r);
        assert!(back.render().contains("QQT"));
    }
}
