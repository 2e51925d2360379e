//! Ground-truth comparison for checkpoint/restore runs.

use thiserror::Error;

use super::reference::reference_states;
use super::workload::share;
use crate::api::ApiCall;
use crate::config::Config;
use crate::cr::{Action, CkptMode, ContextPool, MetricsReport, RestoreMode, RestoreStats};
use crate::image::{read_image, write_image, CheckpointImage};
use crate::process::{Process, ProcessError, StateSnapshot, Trigger};
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle mismatch in {stage}: {detail}")]
    OracleMismatch { stage: &'static str, detail: String },
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error("reference execution failed: {0}")]
    Reference(#[from] SimError),
}

impl OracleError {
    fn mismatch(stage: &'static str, detail: impl Into<String>) -> Self {
        OracleError::OracleMismatch { stage, detail: detail.into() }
    }
}

/// Everything a passing comparison observed, for further assertions.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub image: CheckpointImage,
    pub metrics: MetricsReport,
    pub baseline: CheckpointImage,
    pub ondemand: RestoreStats,
    pub full: RestoreStats,
    pub ondemand_validation_failures: u64,
}

fn expect_eq(stage: &'static str, got: &StateSnapshot, want: &StateSnapshot) -> Result<(), OracleError> {
    match got.diff(want) {
        None => Ok(()),
        Some(d) => Err(OracleError::mismatch(stage, d)),
    }
}

/// Checkpoints `trace` in `mode` before the call with seq `at` and checks:
/// the source run is undisturbed; the image restores (fully and on demand)
/// to the sequential state at its cursor; a stop-the-world checkpoint at
/// the same cursor restores to the same state; restores that continue the
/// trace reach the sequential final state; the image survives encoding.
pub fn compare_oracle(cfg: &Config, trace: &[ApiCall], at: u64, mode: CkptMode) -> Result<OracleReport, OracleError> {
    let shared = share(trace);
    let mut src = Process::new(cfg.clone(), shared.clone());
    src.add_trigger(Trigger::At(at), Action::checkpoint(mode));
    src.run()?;
    let image = src.images.first().cloned().ok_or_else(|| OracleError::mismatch("source", "no image produced"))?;
    let metrics = src.reports.first().cloned().unwrap_or_default();

    let (at_cursor, end) = reference_states(cfg, trace, image.cursor)?;
    expect_eq("source run", &src.state(), &end)?;

    let bytes = write_image(&image).map_err(|e| OracleError::mismatch("encode", e.to_string()))?;
    let decoded = read_image(&bytes).map_err(|e| OracleError::mismatch("decode", e.to_string()))?;
    if decoded != image {
        return Err(OracleError::mismatch("round trip", "decoded image differs"));
    }

    let split = image.cursor.map_or(0, |c| c as usize + 1);
    let prefix = share(&trace[..split]);
    let restore = |img: &CheckpointImage, t, m| -> Result<Process, OracleError> {
        let mut pool = ContextPool::new(cfg.pool_size, cfg.context_creation_ns);
        let mut p = Process::restore(cfg.clone(), img, t, m, &mut pool)?;
        p.run()?;
        Ok(p)
    };

    let concurrent = restore(&decoded, prefix.clone(), RestoreMode::Full)?.state();
    expect_eq("full restore at cursor", &concurrent, &at_cursor)?;
    expect_eq("on-demand restore at cursor", &restore(&decoded, prefix.clone(), RestoreMode::OnDemand)?.state(), &at_cursor)?;

    // Second route: a plain stop-the-world image of the same point.
    let mut stw = Process::new(cfg.clone(), shared.clone());
    stw.add_trigger(Trigger::At(split as u64), Action::checkpoint(CkptMode::StopTheWorld));
    stw.run()?;
    let baseline = stw.images.first().cloned().ok_or_else(|| OracleError::mismatch("baseline", "no image produced"))?;
    if baseline.cursor != image.cursor {
        return Err(OracleError::mismatch("baseline", format!("cursor {:?} vs {:?}", baseline.cursor, image.cursor)));
    }
    let stopped = restore(&baseline, prefix, RestoreMode::Full)?.state();
    expect_eq("baseline restore at cursor", &stopped, &at_cursor)?;
    expect_eq("concurrent vs baseline", &concurrent, &stopped)?;

    let full = restore(&decoded, shared.clone(), RestoreMode::Full)?;
    expect_eq("full restore to end", &full.state(), &end)?;
    let ondemand = restore(&decoded, shared, RestoreMode::OnDemand)?;
    expect_eq("on-demand restore to end", &ondemand.state(), &end)?;
    expect_eq("on-demand vs full", &ondemand.state(), &full.state())?;

    Ok(OracleReport {
        image,
        metrics,
        baseline,
        ondemand: ondemand.restore_stats().unwrap_or_default(),
        full: full.restore_stats().unwrap_or_default(),
        ondemand_validation_failures: ondemand.stats.validation_failures,
    })
}
