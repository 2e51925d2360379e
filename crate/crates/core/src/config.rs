//! Simulator and checkpoint-engine configuration.
//!
//! Loadable from JSON or from a `key = value` text file. Every key is
//! optional and falls back to the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest device virtual address. Host addresses are always below it.
pub const DEVICE_ADDR_BASE: u64 = 0x7000_0000_0000;

/// Device allocation alignment in bytes.
pub const DEVICE_ALIGN: u64 = 256;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Order in which GPU buffers and CPU pages share the checkpoint channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordination {
    /// All GPU buffers first, then CPU pages.
    Sequential,
    /// GPU and CPU jobs alternate on the channel.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Host<->device bandwidth, bytes per second.
    pub pcie_bw: u64,
    /// Network link bandwidth, bytes per second.
    pub network_bw: u64,
    /// On-device copy bandwidth, bytes per second.
    pub device_bw: u64,
    /// Checksum engine throughput, bytes per second.
    pub checksum_bw: u64,
    pub chunk_size: u64,
    pub page_size: u64,
    pub device_capacity: u64,
    pub context_creation_ns: u64,
    pub pool_size: usize,
    /// Dirty-buffer count (as a fraction of Active buffers at session
    /// start) above which new kernels are retained in the DAG.
    pub dirty_threshold: f64,
    /// Remaining-copy estimate under which a conflicting kernel is delayed
    /// rather than staged.
    pub delay_threshold_ns: u64,
    /// Fraction of device capacity reserved for CoW staging.
    pub staging_fraction: f64,
    /// Duration multiplier for kernels that run instrumented.
    pub instrumentation_factor: f64,
    /// Maximum number of processed events before `Livelock`.
    pub event_cap: u64,
    /// CPU time the application spends issuing one API call.
    pub api_issue_ns: u64,
    /// Maximum operations queued or running per stream.
    pub stream_queue_depth: usize,
    /// Deduplicate host-provenance buffers in concurrent checkpoints.
    pub dedup: bool,
    pub coordination: Coordination,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pcie_bw: 22_000_000_000,
            network_bw: 25_000_000_000,
            device_bw: 1_000_000_000_000,
            checksum_bw: 326_000_000_000,
            chunk_size: 64 * 1024,
            page_size: 4096,
            device_capacity: 80_000_000_000,
            context_creation_ns: 2_000_000_000,
            pool_size: 2,
            dirty_threshold: 0.25,
            delay_threshold_ns: 500_000,
            staging_fraction: 1.0 / 16.0,
            instrumentation_factor: 1.2,
            event_cap: 100_000_000,
            api_issue_ns: 0,
            stream_queue_depth: 32,
            dedup: true,
            coordination: Coordination::Sequential,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("pcie_bw", self.pcie_bw),
            ("network_bw", self.network_bw),
            ("device_bw", self.device_bw),
            ("checksum_bw", self.checksum_bw),
            ("chunk_size", self.chunk_size),
            ("page_size", self.page_size),
            ("device_capacity", self.device_capacity),
            ("event_cap", self.event_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be > 0")));
            }
        }
        if self.stream_queue_depth == 0 {
            return Err(ConfigError::Invalid("stream_queue_depth must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.staging_fraction) {
            return Err(ConfigError::Invalid("staging_fraction must be in [0,1]".into()));
        }
        if self.dirty_threshold.is_nan() || self.dirty_threshold < 0.0 {
            return Err(ConfigError::Invalid("dirty_threshold must be >= 0".into()));
        }
        if self.instrumentation_factor.is_nan() || self.instrumentation_factor < 1.0 {
            return Err(ConfigError::Invalid("instrumentation_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses JSON (when the text starts with `{`) or `key = value` lines.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            let mut obj = serde_json::Map::new();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) =
                    line.split_once('=').ok_or_else(|| ConfigError::Parse(format!("line {}: expected key = value", lineno + 1)))?;
                obj.insert(k.trim().to_string(), parse_scalar(v.trim()));
            }
            serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Nanoseconds to move `bytes` at `bw` bytes/s, rounded up.
    pub fn transfer_ns(bytes: u64, bw: u64) -> u64 {
        ((bytes as u128 * 1_000_000_000).div_ceil(bw as u128)) as u64
    }

    pub fn staging_capacity(&self) -> u64 {
        (self.device_capacity as f64 * self.staging_fraction) as u64
    }
}

fn parse_scalar(v: &str) -> serde_json::Value {
    if let Ok(i) = v.parse::<u64>() {
        return i.into();
    }
    if let Ok(f) = v.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(n);
        }
    }
    match v {
        "true" => true.into(),
        "false" => false.into(),
        _ => serde_json::Value::String(v.trim_matches('"').to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_rates() {
        let c = Config::default();
        // 4.6 GB over pcie in about 206 ms.
        let ms = Config::transfer_ns(4_600_000_000, c.pcie_bw) as f64 / 1e6;
        assert!((ms - 206.0).abs() < 5.0, "{ms}");
        // 50.6 GB checksummed in about 155 ms.
        let ms = Config::transfer_ns(50_600_000_000, c.checksum_bw) as f64 / 1e6;
        assert!((ms - 155.0).abs() < 1.0, "{ms}");
        assert_eq!(c.staging_capacity(), 5_000_000_000);
    }

    #[test]
    fn parses_key_value_and_json() {
        let c = Config::parse("chunk_size = 4096\n# comment\ndedup = false\ndirty_threshold=0.5\ncoordination = interleaved").unwrap();
        assert_eq!(c.chunk_size, 4096);
        assert!(!c.dedup);
        assert_eq!(c.dirty_threshold, 0.5);
        assert_eq!(c.coordination, Coordination::Interleaved);
        let j = Config::parse(r#"{"pool_size": 0}"#).unwrap();
        assert_eq!(j.pool_size, 0);
        assert_eq!(j.pcie_bw, Config::default().pcie_bw);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("chunk_size = 0").is_err());
        assert!(Config::parse("nonsense = 1").is_err());
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("instrumentation_factor = 0.5").is_err());
    }
}
