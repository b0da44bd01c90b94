use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use logprov::config::{Config, ConfigError};
use logprov::filters::{drop_events_retention, RetentionModel};
use logprov::graph::GraphError;
use logprov::pipeline::{run_extract, RunOptions};
use logprov::report::RunReport;
use logprov::uploader::{graph_from_json, TargetFormat};
use logprov::workload::{
    events_to_ndjson, gen_oltp, gen_plan_variant, gen_running_example, GeneratedLog, GraphTruth, GroundTruth,
    OltpParams, WorkloadError,
};

/// Prefix of environment variables that override config fields:
/// `LOGPROV__FILTERS__SP_RUNS_ADMITTED=16` sets `filters.sp_runs_admitted`.
const ENV_OVERRIDE_PREFIX: &str = "LOGPROV__";

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "logprov", version, about = "Coarse-grained provenance extraction from query-event logs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one extraction over the configured log directory.
    Extract(ExtractArgs),
    /// Write a synthetic workload log with its catalog and ground truth.
    Generate(GenerateArgs),
    /// Check a graph document for dangling relationships.
    Validate(ValidateArgs),
    /// Print the report of the last extraction run.
    Report(ReportArgs),
    /// Print the effective configuration.
    Config(ConfigArgs),
}

#[derive(clap::Args)]
struct ConfigSource {
    /// Config file; relative paths inside it resolve against its directory.
    #[arg(short, long, env = "LOGPROV_CONFIG")]
    config: Option<PathBuf>,
    /// Config override, `section.field=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(clap::Args)]
struct ExtractArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Upload target: a directory or an `http(s)://` endpoint.
    #[arg(long, env = "LOGPROV_SINK")]
    sink: Option<String>,
    #[arg(long, env = "LOGPROV_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "LOGPROV_TARGET_FORMAT")]
    target_format: Option<TargetFormat>,
    /// Wall clock in microseconds since the epoch.
    #[arg(long)]
    now: Option<i64>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    RunningExample,
    Oltp,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    workload: Workload,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Running-example procedure version (1 or 2).
    #[arg(long, default_value_t = 2)]
    version: u32,
    /// Running-example repetitions.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = OltpParams::default().transactions)]
    transactions: usize,
    #[arg(long, default_value_t = OltpParams::default().clients)]
    clients: usize,
    #[arg(long, default_value_t = OltpParams::default().sp_count)]
    sp_count: usize,
    #[arg(long, default_value_t = OltpParams::default().loop_iters)]
    loop_iters: usize,
    #[arg(long, default_value_t = OltpParams::default().stmts_per_tx)]
    stmts_per_tx: usize,
    #[arg(long, default_value_t = OltpParams::default().max_depth)]
    max_depth: usize,
    #[arg(long, default_value_t = OltpParams::default().seed)]
    seed: u64,
    /// Also log plans; the log grows to about (1 + factor) times its size.
    #[arg(long)]
    plan_factor: Option<f64>,
    /// Pass events through a bounded buffer of this many bytes.
    #[arg(long)]
    drop_events_buffer: Option<usize>,
    /// Buffer drain rate in bytes per second of log time; defaults to twice
    /// the average arrival rate.
    #[arg(long, requires = "drop_events_buffer")]
    drain_rate: Option<f64>,
    /// Events per log file.
    #[arg(long, default_value_t = 100_000)]
    per_file: usize,
    /// Skip the ground truth.
    #[arg(long)]
    no_truth: bool,
}

#[derive(clap::Args)]
struct ValidateArgs {
    /// Graph document as written by `extract`.
    graph: PathBuf,
    /// Ground truth written by `generate`; the graph must equal it.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Report file; defaults to the config's `uploader.report`.
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Print the built-in defaults, ignoring any file.
    #[arg(long)]
    default: bool,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Extract(a) => extract(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Validate(a) => validate(a),
        Cmd::Report(a) => report(a),
        Cmd::Config(a) => show_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

/// File, then `LOGPROV__SECTION__FIELD` variables, then `--set` flags.
fn load_config(src: &ConfigSource) -> Result<Config, Failure> {
    let Some(path) = &src.config else {
        return Err(Failure::Usage("no config file given (--config or LOGPROV_CONFIG)".into()));
    };
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let mut cfg = Config::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut env: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_OVERRIDE_PREFIX)?;
            let (section, field) = rest.split_once("__")?;
            Some((format!("{}.{}", section.to_lowercase(), field.to_lowercase()), v))
        })
        .collect();
    env.sort();
    let flags = src.set.iter().map(|kv| {
        kv.split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))
    });
    for kv in env.into_iter().map(Ok).chain(flags) {
        let (k, v) = kv?;
        cfg.apply_override(&k, &v)?;
    }
    cfg.rebase(base);
    Ok(cfg)
}

fn extract(a: ExtractArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.source)?;
    if let Some(s) = a.sink {
        cfg.uploader.sink = s;
    }
    if let Some(n) = a.batch_size {
        cfg.uploader.batch_size = n;
    }
    if let Some(f) = a.target_format {
        cfg.uploader.target_format = f;
    }
    cfg.validate()?;
    let out = run_extract(&cfg, &RunOptions { now: a.now, ..Default::default() })
        .map_err(|e| Failure::Run(e.to_string()))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out.report).expect("report serializes"));
    } else {
        print!("{}", out.report.render());
    }
    Ok(())
}

fn workload_failure(e: WorkloadError) -> Failure {
    match e {
        WorkloadError::InvalidParam(_) => Failure::Usage(e.to_string()),
        _ => Failure::Run(e.to_string()),
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Run(format!("{}: {e}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let mut log = match a.workload {
        Workload::RunningExample => gen_running_example(a.version, a.repeats),
        Workload::Oltp => gen_oltp(&OltpParams {
            transactions: a.transactions,
            clients: a.clients,
            sp_count: a.sp_count,
            loop_iters: a.loop_iters,
            stmts_per_tx: a.stmts_per_tx,
            max_depth: a.max_depth,
            seed: a.seed,
            truth: !a.no_truth,
        }),
    }
    .map_err(workload_failure)?;
    if let Some(f) = a.plan_factor {
        log = gen_plan_variant(&log, f, a.seed).map_err(workload_failure)?;
    }
    if let Some(buffer) = a.drop_events_buffer {
        if buffer == 0 {
            return Err(Failure::Usage("--drop-events-buffer must be at least 1".into()));
        }
        let events = log.parse_events().map_err(workload_failure)?;
        let drain = a.drain_rate.unwrap_or_else(|| {
            let span = events.last().map_or(0, |e| e.timestamp) - events.first().map_or(0, |e| e.timestamp);
            2.0 * log.bytes() as f64 / (span.max(1) as f64 / 1e6)
        });
        let (kept, stats) = drop_events_retention(events, &RetentionModel { buffer_bytes: buffer, drain_bytes_per_sec: drain });
        eprintln!("dropped {} of {} events ({} of {} bytes)", stats.events_dropped, stats.events_in, stats.bytes_dropped, stats.bytes_in);
        log.ndjson = events_to_ndjson(&kept);
        log.events = kept.len();
    }
    write_generated(&log, &a.out, a.per_file)?;
    println!("wrote {} events ({} bytes) to {}", log.events, log.bytes(), a.out.join("logs").display());
    Ok(())
}

fn write_generated(log: &GeneratedLog, out: &Path, per_file: usize) -> Result<(), Failure> {
    let logs = out.join("logs");
    if logs.exists() {
        std::fs::remove_dir_all(&logs).map_err(io_failure(&logs))?;
    }
    log.write_dir(&logs, per_file).map_err(workload_failure)?;
    let state = out.join("state");
    std::fs::create_dir_all(&state).map_err(io_failure(&state))?;
    let catalog = state.join("catalog.json");
    log.catalog.save(&catalog).map_err(|e| Failure::Run(e.to_string()))?;
    if let Some(t) = &log.truth {
        let p = out.join("truth.json");
        std::fs::write(&p, serde_json::to_string_pretty(t).expect("truth serializes")).map_err(io_failure(&p))?;
    }
    let cfg = out.join("logprov.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, Config::default().to_toml()).map_err(io_failure(&cfg))?;
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.graph).map_err(io_failure(&a.graph))?;
    let g = graph_from_json(&text).map_err(|e| Failure::Run(e.to_string()))?;
    if let Err(GraphError::Invalid(problems)) = g.validate() {
        for p in &problems {
            println!("{p}");
        }
        return Err(Failure::Run(format!("{} problems in {}", problems.len(), a.graph.display())));
    }
    println!("valid: {} entities, {} relationships", g.entity_count(), g.relationship_count());
    if let Some(tp) = a.truth {
        let text = std::fs::read_to_string(&tp).map_err(io_failure(&tp))?;
        let truth: GroundTruth = serde_json::from_str(&text).map_err(|e| Failure::Run(format!("{}: {e}", tp.display())))?;
        let diff = GraphTruth::of(&g).diff(&truth.graph, 50);
        if !diff.is_empty() {
            for d in &diff {
                println!("{d}");
            }
            return Err(Failure::Run("graph differs from ground truth".into()));
        }
        println!("matches ground truth");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let path = match a.path {
        Some(p) => p,
        None => load_config(&a.source)?.uploader.report,
    };
    let r = RunReport::load(&path).map_err(io_failure(&path))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    } else {
        print!("{}", r.render());
    }
    Ok(())
}

fn show_config(a: ConfigArgs) -> Result<(), Failure> {
    let cfg = if a.default { Config::default() } else { load_config(&a.source)? };
    print!("{}", cfg.to_toml());
    Ok(())
}
