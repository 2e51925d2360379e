use std::fmt;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::Path;

use gpucr::api::{read_trace, write_trace, ApiCall};
use gpucr::config::Config;
use gpucr::cr::{Action, ContextPool};
use gpucr::harness::{generate, reference_final, run_sweep, share, write_csv, OracleError, Scenario, Sweep, SweepError, WorkloadProfile};
use gpucr::image::{read_image, write_image, CheckpointImage, GpuRecord, ImageError, ImageKind};
use gpucr::process::{Process, ProcessError, StateSnapshot, Trigger};
use serde_json::{json, Value};

use crate::{BenchArgs, CkptArgs, GenArgs, InspectArgs, MigrateArgs, RestoreArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Corrupt(String),
    Oracle(String),
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Failed(_) => 1,
            CliError::Corrupt(_) => 2,
            CliError::Oracle(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) | CliError::Corrupt(m) => f.write_str(m),
            CliError::Oracle(m) => write!(f, "oracle mismatch: {m}"),
        }
    }
}

impl From<ProcessError> for CliError {
    fn from(e: ProcessError) -> Self {
        match e {
            ProcessError::Image(ImageError::CorruptImage { .. }) => CliError::Corrupt(e.to_string()),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::OracleMismatch { .. } => CliError::Oracle(e.to_string()),
            OracleError::Process(p) => p.into(),
            e => CliError::Failed(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(what: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", what.display()))
}

pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
        None => Ok(Config::default()),
    }
}

fn load_trace(path: &Path) -> Result<Vec<ApiCall>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_trace(BufReader::new(f)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<CheckpointImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_image(&bytes).map_err(|e| CliError::Corrupt(e.to_string()))
}

fn save_image(path: &Path, img: &CheckpointImage) -> Result<usize> {
    let bytes = write_image(img).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(bytes.len())
}

fn check_at(at: u64, trace: &[ApiCall]) -> Result<()> {
    if at as usize >= trace.len() {
        return Err(CliError::Usage(format!("--at {at} is past the end of a {}-call trace", trace.len())));
    }
    Ok(())
}

fn expect_final(cfg: &Config, trace: &[ApiCall], got: &StateSnapshot, stage: &str) -> Result<()> {
    let want = reference_final(cfg, trace).map_err(|e| CliError::Failed(e.to_string()))?;
    match got.diff(&want) {
        None => Ok(()),
        Some(d) => Err(CliError::Oracle(format!("{stage}: {d}"))),
    }
}

fn emit(v: &Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| CliError::Failed(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::Failed(e.to_string()))
}

pub fn ckpt(cfg: Config, a: CkptArgs) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    check_at(a.at, &trace)?;
    let mut p = Process::new(cfg.clone(), share(&trace));
    p.add_trigger(Trigger::At(a.at), Action::checkpoint(a.mode));
    let run = p.run()?;
    expect_final(&cfg, &trace, &p.state(), "checkpointed run")?;
    let img = p.images.first().ok_or_else(|| CliError::Failed("the trigger never fired".into()))?;
    let n = save_image(&a.out, img)?;
    eprintln!("wrote {} ({n} bytes, cursor {:?})", a.out.display(), img.cursor);
    emit(&json!({ "metrics": p.reports[0], "run": run }))
}

pub fn restore(cfg: Config, a: RestoreArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let trace = match &a.trace {
        Some(t) => load_trace(t)?,
        None => Vec::new(),
    };
    let mut pool = ContextPool::new(a.pool.unwrap_or(cfg.pool_size), cfg.context_creation_ns);
    let mut p = Process::restore(cfg.clone(), &img, share(&trace), a.mode, &mut pool)?;
    let run = p.run()?;
    if a.trace.is_some() {
        expect_final(&cfg, &trace, &p.state(), "restored run")?;
    }
    eprintln!("restored {} at t={} ns", a.image.display(), run.end_ns);
    emit(&json!({ "restore": p.restore_stats().unwrap_or_default(), "run": run }))
}

pub fn migrate(mut cfg: Config, a: MigrateArgs) -> Result<()> {
    if a.net_bw == 0 {
        return Err(CliError::Usage("--net-bw must be positive".into()));
    }
    cfg.network_bw = a.net_bw;
    let trace = load_trace(&a.trace)?;
    check_at(a.at, &trace)?;
    let shared = share(&trace);
    let mut src = Process::new(cfg.clone(), shared.clone());
    src.add_trigger(Trigger::At(a.at), Action::migrate(a.mode));
    src.run()?;
    let img = src.images.first().ok_or_else(|| CliError::Failed("the trigger never fired".into()))?;
    if let Some(out) = &a.out {
        save_image(out, img)?;
    }
    let mut pool = ContextPool::new(cfg.pool_size, cfg.context_creation_ns);
    let mut dst = Process::restore(cfg.clone(), img, shared, a.restore_mode, &mut pool)?;
    let run = dst.run()?;
    expect_final(&cfg, &trace, &dst.state(), "migrated run")?;
    let m = &src.reports[0];
    eprintln!("migrated at seq {:?}: downtime {} ns", img.cursor, m.downtime_ns);
    emit(&json!({ "metrics": m, "restore": dst.restore_stats().unwrap_or_default(), "run": run }))
}

pub fn bench(cfg: Config, a: BenchArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scenario).map_err(io_err(&a.scenario))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.scenario.display())))?;
    let has_config = doc.get("config").is_some();
    let mut s: Scenario = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("{}: {e}", a.scenario.display())))?;
    if !has_config {
        s.config = cfg;
    }
    s.workload.validate().map_err(CliError::Usage)?;
    let sweep = a.sweep.as_deref().map(Sweep::parse).transpose().map_err(CliError::Usage)?;
    let rows = run_sweep(&s, sweep.as_ref()).map_err(|e| match e {
        SweepError::Run { source, .. } => source.into(),
        SweepError::Cell { cell, msg } => CliError::Usage(format!("sweep cell {cell}: {msg}")),
        e => CliError::Failed(e.to_string()),
    })?;
    let f = fs::File::create(&a.csv).map_err(io_err(&a.csv))?;
    write_csv(f, &rows).map_err(|e| CliError::Failed(e.to_string()))?;
    eprintln!("{} cell(s) written to {}", rows.len(), a.csv.display());
    emit(&serde_json::to_value(&rows).map_err(|e| CliError::Failed(e.to_string()))?)
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let sizes = img.section_sizes();
    let buffer_bytes: u64 = img.allocs.iter().map(|r| r.size).sum();
    let count = |f: fn(&GpuRecord) -> bool| img.gpu.values().filter(|r| f(r)).count();
    let dedup = img.dedup_bytes();
    emit(&json!({
        "kind": match img.kind {
            ImageKind::StopTheWorld => "stw",
            ImageKind::Cow => "cow",
            ImageKind::DirtyBit => "dirty",
        },
        "cursor": img.cursor,
        "page_size": img.page_size,
        "buffers": img.allocs.len(),
        "buffer_bytes": buffer_bytes,
        "host_pages": img.host_pages.len(),
        "streams": img.streams,
        "sections": { "host": sizes.host, "gpu": sizes.gpu, "dag": sizes.dag, "meta": sizes.meta, "total": sizes.total },
        "records": {
            "inline": count(|r| matches!(r, GpuRecord::Inline(_))),
            "dedup": count(|r| matches!(r, GpuRecord::DedupRef { .. })),
            "recompute": count(|r| matches!(r, GpuRecord::Recompute(_))),
        },
        "inline_bytes": img.inline_bytes(),
        "dedup_saved_bytes": dedup,
        "dedup_saved_fraction": if buffer_bytes == 0 { 0.0 } else { dedup as f64 / buffer_bytes as f64 },
        "dag_nodes": img.dag.node_count(),
        "dag_kernels": img.dag.kernel_count(),
    }))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut profile = match WorkloadProfile::desk(&a.profile) {
        Some(p) => p,
        None => {
            let path = Path::new(&a.profile);
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!(
                    "{}: not a profile name ({}) and not readable: {e}",
                    a.profile,
                    WorkloadProfile::names().collect::<Vec<_>>().join(", ")
                ))
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.profile)))?
        }
    };
    if let Some(seed) = a.seed {
        profile = profile.with_seed(seed);
    }
    profile.validate().map_err(CliError::Usage)?;
    let w = generate(&profile);
    match &a.out {
        Some(path) => {
            let f = fs::File::create(path).map_err(io_err(path))?;
            write_trace(io::BufWriter::new(f), &w.trace).map_err(|e| CliError::Failed(e.to_string()))?;
            eprintln!("{} calls written to {}", w.trace.len(), path.display());
        }
        None => write_trace(io::stdout().lock(), &w.trace).map_err(|e| CliError::Failed(e.to_string()))?,
    }
    Ok(())
}
