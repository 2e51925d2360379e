use serde::{Deserialize, Serialize};

use super::oracle::OracleError;
use super::profile::WorkloadProfile;
use super::reference::reference_final;
use super::workload::{generate, Workload};
use crate::api::ApiCall;
use crate::config::Config;
use crate::cr::{Action, CkptMode, ContextPool, DirtyOptions, MetricsReport, RestoreMode};
use crate::image::CheckpointImage;
use crate::process::{Process, RunStats, StateSnapshot, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ScenarioKind {
    /// Checkpoint after every `interval` device-wide syncs.
    FaultTolerance { interval: u64 },
    /// Move the process to a peer over the network, starting before the
    /// launch `at_fraction` of the way through the run.
    Migration { at_fraction: f64 },
    /// Restore from an image taken like a migration and time the first kernel.
    Startup { at_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    #[default]
    StopTheWorld,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub workload: WorkloadProfile,
    pub config: Config,
    pub mode: CkptMode,
    pub restore_mode: RestoreMode,
    pub comparator: Comparator,
    pub requeue: bool,
    pub retain: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            kind: ScenarioKind::FaultTolerance { interval: 3 },
            workload: WorkloadProfile::default(),
            config: Config::default(),
            mode: CkptMode::DirtyBit,
            restore_mode: RestoreMode::OnDemand,
            comparator: Comparator::StopTheWorld,
            requeue: true,
            retain: true,
        }
    }
}

/// One protocol's run of a scenario.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Measured {
    /// Sessions summed field by field.
    pub metrics: MetricsReport,
    pub sessions: Vec<MetricsReport>,
    pub run: RunStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub candidate: Measured,
    pub base: Option<Measured>,
}

fn accumulate(total: &mut MetricsReport, r: &MetricsReport) {
    if total.mode.is_empty() {
        total.mode = r.mode.clone();
    }
    total.stall_ns += r.stall_ns;
    total.downtime_ns += r.downtime_ns;
    total.bytes_precopy += r.bytes_precopy;
    total.bytes_dirty += r.bytes_dirty;
    total.bytes_dedup_saved += r.bytes_dedup_saved;
    total.cow_copies += r.cow_copies;
    total.validation_failures += r.validation_failures;
    total.image_bytes += r.image_bytes;
    total.stop_ns += r.stop_ns;
    total.bytes_retransmit += r.bytes_retransmit;
    total.bytes_cpu += r.bytes_cpu;
    total.bytes_cpu_dirty += r.bytes_cpu_dirty;
    total.dag_bytes += r.dag_bytes;
    total.meta_bytes += r.meta_bytes;
    total.bytes_dirty_stop += r.bytes_dirty_stop;
    total.retained_kernels += r.retained_kernels;
    total.restarts += r.restarts;
    total.stw_fallbacks += r.stw_fallbacks;
    total.staged_bytes += r.staged_bytes;
    total.delayed_kernels += r.delayed_kernels;
}

fn check(stage: &'static str, got: &StateSnapshot, want: &StateSnapshot) -> Result<(), OracleError> {
    match got.diff(want) {
        None => Ok(()),
        Some(detail) => Err(OracleError::OracleMismatch { stage, detail }),
    }
}

/// Seq of the launch `fraction` of the way through the run's launches.
pub fn trigger_seq(trace: &[ApiCall], fraction: f64) -> u64 {
    let launches: Vec<u64> = trace.iter().filter(|c| c.kind.is_launch()).map(|c| c.seq).collect();
    if launches.is_empty() {
        return (trace.len() as f64 * fraction.clamp(0.0, 1.0)) as u64;
    }
    let i = ((launches.len() - 1) as f64 * fraction.clamp(0.0, 1.0)) as usize;
    launches[i]
}

struct Protocol {
    mode: CkptMode,
    restore_mode: RestoreMode,
    dirty: DirtyOptions,
    pool: usize,
}

fn restore_run(
    cfg: &Config,
    image: &CheckpointImage,
    w: &Workload,
    proto: &Protocol,
    end: &StateSnapshot,
) -> Result<(Option<u64>, RunStats), OracleError> {
    let mut pool = ContextPool::new(proto.pool, cfg.context_creation_ns);
    let mut dst = Process::restore(cfg.clone(), image, w.shared_trace(), proto.restore_mode, &mut pool)?;
    let run = dst.run()?;
    check("restored run", &dst.state(), end)?;
    Ok((dst.restore_stats().and_then(|s| s.first_kernel_ns), run))
}

fn measure(s: &Scenario, w: &Workload, proto: &Protocol, end: &StateSnapshot) -> Result<Measured, OracleError> {
    let cfg = &s.config;
    let mut src = Process::new(cfg.clone(), w.shared_trace());
    let action = |a: Action| a.with_dirty(proto.dirty);
    match s.kind {
        ScenarioKind::FaultTolerance { interval } => {
            src.add_trigger(Trigger::EverySyncs(interval.max(1)), action(Action::checkpoint(proto.mode)));
        }
        ScenarioKind::Migration { at_fraction } => {
            src.add_trigger(Trigger::At(trigger_seq(&w.trace, at_fraction)), action(Action::migrate(proto.mode)));
        }
        ScenarioKind::Startup { at_fraction } => {
            src.add_trigger(Trigger::At(trigger_seq(&w.trace, at_fraction)), action(Action::checkpoint(proto.mode)));
        }
    }
    let mut run = src.run()?;
    if !src.is_halted() {
        check("source run", &src.state(), end)?;
    }
    let mut metrics = MetricsReport::default();
    for r in &src.reports {
        accumulate(&mut metrics, r);
    }
    if !matches!(s.kind, ScenarioKind::FaultTolerance { .. }) {
        let image = src.images.first().ok_or(OracleError::OracleMismatch { stage: "source run", detail: "no image".into() })?;
        let (first, dst_run) = restore_run(cfg, image, w, proto, end)?;
        metrics.restore_first_kernel_ns = first;
        if matches!(s.kind, ScenarioKind::Startup { .. }) {
            run = dst_run;
        }
    }
    Ok(Measured { metrics, sessions: src.reports, run })
}

/// Runs the scenario with its protocol and, if asked, with the
/// stop-the-world baseline. Every run is checked against sequential
/// execution before anything is reported.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioOutcome, OracleError> {
    s.config.validate().map_err(|e| OracleError::OracleMismatch { stage: "config", detail: e.to_string() })?;
    let w = generate(&s.workload);
    let end = reference_final(&s.config, &w.trace)?;
    let proto = Protocol {
        mode: s.mode,
        restore_mode: s.restore_mode,
        dirty: DirtyOptions { requeue: s.requeue, retain: s.retain },
        pool: s.config.pool_size,
    };
    let candidate = measure(s, &w, &proto, &end)?;
    let base = match s.comparator {
        Comparator::None => None,
        Comparator::StopTheWorld => {
            let base = Protocol { mode: CkptMode::StopTheWorld, restore_mode: RestoreMode::Full, dirty: DirtyOptions::default(), pool: 0 };
            Some(measure(s, &w, &base, &end)?)
        }
    };
    Ok(ScenarioOutcome { name: s.name.clone(), candidate, base })
}
