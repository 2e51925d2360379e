//! Checkpoint and restore protocols running inside a [`Process`](crate::process::Process).
//!
//! Three checkpoint flavours share one session driver: stop-the-world (the
//! baseline), soft copy-on-write and soft dirty-bit with DAG retention.
//! Restore loads an image either fully before admitting the application or
//! on demand, guided by the checkpointed DAG.

mod checkpoint;
mod metrics;
mod pool;
mod restore;

use serde::{Deserialize, Serialize};

use crate::sim::Channel;

pub(crate) use checkpoint::Session;
pub use metrics::MetricsReport;
pub use pool::ContextPool;
pub(crate) use restore::RestoreCtx;
pub use restore::RestoreStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkptMode {
    #[serde(rename = "stw")]
    StopTheWorld,
    Cow,
    #[serde(rename = "dirty")]
    DirtyBit,
}

impl CkptMode {
    pub fn name(self) -> &'static str {
        match self {
            CkptMode::StopTheWorld => "stw",
            CkptMode::Cow => "cow",
            CkptMode::DirtyBit => "dirty",
        }
    }
}

impl std::str::FromStr for CkptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stw" => Ok(CkptMode::StopTheWorld),
            "cow" => Ok(CkptMode::Cow),
            "dirty" => Ok(CkptMode::DirtyBit),
            _ => Err(format!("unknown checkpoint mode {s:?} (expected cow, dirty or stw)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoreMode {
    OnDemand,
    Full,
}

impl std::str::FromStr for RestoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ondemand" => Ok(RestoreMode::OnDemand),
            "full" => Ok(RestoreMode::Full),
            _ => Err(format!("unknown restore mode {s:?} (expected ondemand or full)")),
        }
    }
}

/// Dirty-bit tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirtyOptions {
    /// Re-copy buffers dirtied during pre-copy while the pre-copy runs.
    pub requeue: bool,
    /// Retain new kernels in the DAG instead of draining them at the stop.
    pub retain: bool,
}

impl Default for DirtyOptions {
    fn default() -> Self {
        Self { requeue: true, retain: true }
    }
}

/// What a trigger does when it fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action {
    pub mode: CkptMode,
    pub channel: Channel,
    /// Stop the process once the image is complete (migration).
    pub halt: bool,
    pub dirty: DirtyOptions,
}

impl Action {
    pub fn checkpoint(mode: CkptMode) -> Self {
        Self { mode, channel: Channel::Pcie, halt: false, dirty: DirtyOptions::default() }
    }

    pub fn migrate(mode: CkptMode) -> Self {
        Self { mode, channel: Channel::Network, halt: true, dirty: DirtyOptions::default() }
    }

    pub fn with_dirty(mut self, dirty: DirtyOptions) -> Self {
        self.dirty = dirty;
        self
    }
}
