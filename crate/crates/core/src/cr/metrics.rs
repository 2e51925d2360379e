use serde::{Deserialize, Serialize};

/// Per-session accounting. The first ten fields are the stable report
/// schema; the rest are diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub stall_ns: u64,
    pub downtime_ns: u64,
    pub bytes_precopy: u64,
    pub bytes_dirty: u64,
    pub bytes_dedup_saved: u64,
    pub cow_copies: u64,
    pub validation_failures: u64,
    pub image_bytes: u64,
    pub restore_first_kernel_ns: Option<u64>,

    pub session_start_ns: u64,
    pub session_end_ns: u64,
    /// Time with the issue gate closed.
    pub stop_ns: u64,
    pub cursor: Option<u64>,
    pub bytes_retransmit: u64,
    pub bytes_cpu: u64,
    pub bytes_cpu_dirty: u64,
    pub dag_bytes: u64,
    pub meta_bytes: u64,
    /// GPU bytes copied inside the final stop.
    pub bytes_dirty_stop: u64,
    pub dag_nodes: u64,
    pub retained_kernels: u64,
    /// Buffers tracked at session start.
    pub tracked_buffers: u64,
    pub gpu_dirty_fraction: f64,
    pub cpu_dirty_fraction: f64,
    /// Distinct buffers dirtied by the end of the GPU pre-copy phase.
    pub gpu_phase_dirty: u64,
    /// Write-set bytes of work in flight when retention began.
    pub slack_bytes: u64,
    pub soft_stop: bool,
    pub restarts: u64,
    pub stw_fallbacks: u64,
    pub offenders: Vec<String>,
    pub staged_bytes: u64,
    pub delayed_kernels: u64,
    pub premature_starts: u64,
    pub repairs: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_fields_present() {
        let v: serde_json::Value = serde_json::from_str(&MetricsReport::default().to_json()).unwrap();
        for k in [
            "mode",
            "stall_ns",
            "downtime_ns",
            "bytes_precopy",
            "bytes_dirty",
            "bytes_dedup_saved",
            "cow_copies",
            "validation_failures",
            "image_bytes",
            "restore_first_kernel_ns",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
