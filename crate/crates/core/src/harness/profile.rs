use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Coordination};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DurationDist {
    Fixed { ns: u64 },
    LogNormal { p50_ns: u64, p99_ns: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadProfile {
    pub name: String,
    pub n_buffers: usize,
    pub total_bytes: u64,
    /// Kernel launches over the whole run.
    pub n_kernels: usize,
    pub duration: DurationDist,
    pub streams: u32,
    /// Fraction of non-parameter buffers written in each iteration.
    pub write_locality: f64,
    /// Fraction of bytes loaded once from the host and never written.
    pub param_fraction: f64,
    pub opaque_fraction: f64,
    /// Fraction of opaque launches whose true writes exceed their arguments.
    pub adversarial_rate: f64,
    pub seed: u64,
    pub iterations: usize,
    pub training: bool,
    /// Allocate and free a scratch buffer every iteration.
    pub scratch: bool,
    /// Create an extra stream for the last iteration and destroy it after.
    pub transient_stream: bool,
}

impl Default for WorkloadProfile {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            n_buffers: 16,
            total_bytes: 1 << 20,
            n_kernels: 200,
            duration: DurationDist::LogNormal { p50_ns: 1_000, p99_ns: 4_000 },
            streams: 2,
            write_locality: 0.5,
            param_fraction: 0.0,
            opaque_fraction: 0.15,
            adversarial_rate: 0.0,
            seed: 0,
            iterations: 8,
            training: true,
            scratch: false,
            transient_stream: false,
        }
    }
}

/// Kernel p99 at desk scale: 200 us divided by 100. Rows shrink bytes
/// 1000x and kernel counts 10x, so total compute shrinks 1000x like copies.
pub const DESK_P99_NS: u64 = 2_000;

/// Parameter share of the GPT-2 inference image that dedup removes.
pub const GPT2_INFER_PARAM_FRACTION: f64 = 1.0 - 709.0 / 6244.0;

struct Row {
    name: &'static str,
    bytes: u64,
    buffers: usize,
    kernels: usize,
    training: bool,
}

const TABLE: &[Row] = &[
    Row { name: "resnet-train", bytes: 1_300_000, buffers: 224, kernels: 356, training: true },
    Row { name: "resnet-infer", bytes: 354_400, buffers: 52, kernels: 122, training: false },
    Row { name: "gpt2-train", bytes: 30_800_000, buffers: 1044, kernels: 12_548, training: true },
    Row { name: "gpt2-infer", bytes: 6_500_000, buffers: 249, kernels: 7_271, training: false },
    Row { name: "bert-train", bytes: 15_600_000, buffers: 409, kernels: 1_475, training: true },
    Row { name: "bert-infer", bytes: 5_800_000, buffers: 271, kernels: 302, training: false },
    Row { name: "ppo-train", bytes: 5_600_000, buffers: 97, kernels: 62_889, training: true },
    Row { name: "llama2-infer", bytes: 51_700_000, buffers: 328, kernels: 82_563, training: false },
];

impl WorkloadProfile {
    pub fn names() -> impl Iterator<Item = &'static str> {
        TABLE.iter().map(|r| r.name)
    }

    /// A desk-scale application profile by name, e.g. "gpt2-train".
    pub fn desk(name: &str) -> Option<Self> {
        let name = name.strip_suffix("-desk").unwrap_or(name);
        let r = TABLE.iter().find(|r| r.name == name)?;
        let param_fraction = match (r.name, r.training) {
            ("gpt2-infer", _) => GPT2_INFER_PARAM_FRACTION,
            (_, false) => 0.9,
            (_, true) => 0.0,
        };
        Some(Self {
            name: format!("{}-desk", r.name),
            n_buffers: r.buffers,
            total_bytes: r.bytes,
            n_kernels: r.kernels,
            duration: DurationDist::LogNormal { p50_ns: DESK_P99_NS / 4, p99_ns: DESK_P99_NS },
            streams: 2,
            write_locality: if r.training { 0.6 } else { 0.15 },
            param_fraction,
            opaque_fraction: 0.15,
            adversarial_rate: 0.0,
            seed: 0,
            iterations: 8,
            training: r.training,
            scratch: false,
            transient_stream: false,
        })
    }

    pub fn all_desk() -> Vec<Self> {
        Self::names().map(|n| Self::desk(n).unwrap()).collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// A small random profile for fuzz campaigns.
    pub fn fuzz(seed: u64, adversarial_rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF022);
        let n_buffers = rng.gen_range(3..=12);
        let training = rng.gen_bool(0.5);
        Self {
            name: format!("fuzz-{seed}"),
            n_buffers,
            total_bytes: rng.gen_range(n_buffers as u64 * 512..=400_000),
            n_kernels: rng.gen_range(10..=90),
            duration: if rng.gen_bool(0.3) {
                DurationDist::Fixed { ns: rng.gen_range(500..=20_000) }
            } else {
                DurationDist::LogNormal { p50_ns: rng.gen_range(500..=5_000), p99_ns: rng.gen_range(6_000..=40_000) }
            },
            streams: rng.gen_range(1..=3),
            write_locality: rng.gen_range(0.1..=1.0),
            param_fraction: if training { 0.0 } else { rng.gen_range(0.0..=0.8) },
            opaque_fraction: rng.gen_range(0.0..=0.7),
            adversarial_rate,
            seed,
            iterations: rng.gen_range(1..=5),
            training,
            scratch: rng.gen_bool(0.4),
            transient_stream: rng.gen_bool(0.25),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let frac = |v: f64, n: &str| if (0.0..=1.0).contains(&v) { Ok(()) } else { Err(format!("{n} = {v} outside [0, 1]")) };
        frac(self.write_locality, "write_locality")?;
        frac(self.param_fraction, "param_fraction")?;
        frac(self.opaque_fraction, "opaque_fraction")?;
        frac(self.adversarial_rate, "adversarial_rate")?;
        if self.n_buffers == 0 {
            return Err("n_buffers must be at least 1".into());
        }
        if self.total_bytes < 8 * self.n_buffers as u64 {
            return Err("total_bytes must allow 8 bytes per buffer".into());
        }
        if self.streams == 0 || self.iterations == 0 {
            return Err("streams and iterations must be positive".into());
        }
        if let DurationDist::LogNormal { p50_ns, p99_ns } = self.duration {
            if p50_ns == 0 || p99_ns < p50_ns {
                return Err("lognormal needs 0 < p50 <= p99".into());
            }
        }
        Ok(())
    }
}

/// A random configuration for fuzz campaigns: small staging, tight
/// thresholds and shallow queues to reach the rarer protocol paths.
pub fn fuzz_config(seed: u64) -> Config {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0F1);
    Config {
        dirty_threshold: [0.0, 0.1, 0.25, 0.5, 1.0][rng.gen_range(0..5)],
        delay_threshold_ns: [0, 2_000, 20_000, 500_000][rng.gen_range(0..4)],
        device_capacity: [1 << 22, 1 << 24, 80_000_000_000][rng.gen_range(0..3)],
        stream_queue_depth: [1, 2, 4, 32][rng.gen_range(0..4)],
        api_issue_ns: [0, 0, 100][rng.gen_range(0..3)],
        dedup: rng.gen_bool(0.7),
        coordination: if rng.gen_bool(0.5) { Coordination::Sequential } else { Coordination::Interleaved },
        ..Config::default()
    }
}
