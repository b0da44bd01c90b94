use std::path::Path;
use std::process::{Command, Output};

fn logprov(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logprov"))
        .args(args)
        .current_dir(dir)
        .env_remove("LOGPROV_CONFIG")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn read_logs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = logprov(&["extract", "--config", "nope.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("Usage"), "{}", text(&o));

    let o = logprov(&["extract"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("Usage"));
}

#[test]
fn running_example_extract_matches_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = logprov(&["generate", "--workload", "running-example", "--out", "."], d);
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("truth.json").exists());

    let o = logprov(&["extract", "--config", "logprov.toml", "--sink", "batches", "--json"], d);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["counts"]["activities_processed"], 1);
    assert!(d.join("batches/batch-1.json").exists());

    let o = logprov(&["validate", "out/graph.json", "--truth", "truth.json"], d);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("matches ground truth"));

    let o = logprov(&["report", "--config", "logprov.toml"], d);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("Stitcher"));

    let o = logprov(&["extract", "--config", "logprov.toml", "--json"], d);
    let again: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(again["counts"]["activities_processed"], 0);
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &str| {
        vec!["generate", "--workload", "oltp", "--transactions", "20", "--seed", "1", "--per-file", "500", "--out", out]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    for out in ["a", "b"] {
        let a = args(out);
        let o = logprov(&a.iter().map(String::as_str).collect::<Vec<_>>(), d);
        assert!(o.status.success(), "{}", text(&o));
    }
    let a = read_logs(&d.join("a/logs"));
    assert!(a.len() > 1);
    assert_eq!(a, read_logs(&d.join("b/logs")));
}

#[test]
fn invalid_generate_params_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = logprov(&["generate", "--workload", "oltp", "--transactions", "0", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = logprov(&["generate", "--workload", "running-example", "--version", "7", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = logprov(&["generate", "--workload", "oltp", "--plan-factor", "0", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn overrides_from_flags_and_env() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[filters]\nsp_runs_admitted = 4\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_logprov"))
        .args(["config", "--config", "c.toml", "--set", "uploader.batch_size=7"])
        .current_dir(dir.path())
        .env("LOGPROV__FILTERS__LOOP_ITERS_ADMITTED", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("sp_runs_admitted = 4"), "{s}");
    assert!(s.contains("loop_iters_admitted = 3"), "{s}");
    assert!(s.contains("batch_size = 7"), "{s}");

    let o = logprov(&["config", "--config", "c.toml", "--set", "filters.nope=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = logprov(&["config", "--default"], dir.path());
    std::fs::write(dir.path().join("d.toml"), &a.stdout).unwrap();
    let b = logprov(&["config", "--config", "d.toml"], dir.path());
    assert!(b.status.success(), "{}", text(&b));
    // paths are resolved against the file's directory on load
    let norm = |o: &Output| String::from_utf8_lossy(&o.stdout).replace(&format!("{}/", dir.path().display()), "");
    assert_eq!(norm(&a), norm(&b));
}

#[test]
fn validate_rejects_dangling_relationship() {
    let dir = tempfile::tempdir().unwrap();
    let doc = r#"{"entities":[],"relationships":[{"typeName":"spawned_by","end1":{"guid":"01"},"end2":{"guid":"02"}}]}"#;
    std::fs::write(dir.path().join("g.json"), doc).unwrap();
    let o = logprov(&["validate", "g.json"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}
