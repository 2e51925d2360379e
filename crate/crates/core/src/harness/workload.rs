//! Synthetic trace generation.
//!
//! Traces are race-free by construction: within one iteration a buffer
//! written on stream `s` is touched only by stream `s`, and buffers read
//! across streams are not written. Iterations end with a device-wide sync.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::profile::{DurationDist, WorkloadProfile};
use crate::api::{known_kernel_names, known_signature, ApiCall, ApiKind, Arg, Role};
use crate::config::DEVICE_ALIGN;
use crate::sim::{BufferHandle, Device};

/// Host address of the first parameter region.
pub const HOST_BASE: u64 = 0x1000_0000;
/// Host regions start on this alignment so no two share a page.
pub const HOST_ALIGN: u64 = 1 << 16;

pub const ADVERSARIAL_KERNEL: &str = "fused_adv_kernel";

const OPAQUE_NAMES: &[&str] =
    &["elementwise_add", "layernorm_fwd", "gelu_fwd", "adam_step", "reduce_sum", "embedding_gather", "dropout_mask"];

#[derive(Debug, Clone)]
pub struct Workload {
    pub profile: WorkloadProfile,
    pub trace: Vec<ApiCall>,
    /// Seq of each iteration-ending DeviceSynchronize.
    pub iteration_ends: Vec<u64>,
    pub buffer_sizes: Vec<u64>,
    pub param_buffers: Vec<BufferHandle>,
    pub input: BufferHandle,
    pub output: BufferHandle,
}

impl Workload {
    pub fn shared_trace(&self) -> Arc<[Arc<ApiCall>]> {
        share(&self.trace)
    }

    pub fn launches(&self) -> usize {
        self.trace.iter().filter(|c| c.kind.is_launch()).count()
    }

    pub fn opaque_launches(&self) -> usize {
        self.trace.iter().filter(|c| c.kind == ApiKind::LaunchOpaque).count()
    }
}

pub fn share(calls: &[ApiCall]) -> Arc<[Arc<ApiCall>]> {
    calls.iter().cloned().map(Arc::new).collect()
}

/// Lognormal weights scaled to sum exactly to `total`, each a multiple of
/// 8 bytes except possibly the last.
fn split_bytes(rng: &mut ChaCha8Rng, n: usize, total: u64) -> Vec<u64> {
    if n == 0 {
        return Vec::new();
    }
    let dist = LogNormal::new(0.0, 1.0).unwrap();
    let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    let units = total / 8;
    let mut sizes: Vec<u64> = w.iter().map(|x| ((x / sum * units as f64) as u64).max(1) * 8).collect();
    // Settle rounding on the largest buffer so the total is exact.
    let big = (0..n).max_by_key(|&i| sizes[i]).unwrap();
    let others: u64 = sizes.iter().enumerate().filter(|(i, _)| *i != big).map(|(_, s)| s).sum();
    sizes[big] = total.saturating_sub(others).max(8);
    sizes
}

fn duration(rng: &mut ChaCha8Rng, d: DurationDist) -> u64 {
    match d {
        DurationDist::Fixed { ns } => ns.max(1),
        DurationDist::LogNormal { p50_ns, p99_ns } => {
            let mu = (p50_ns as f64).ln();
            let sigma = ((p99_ns as f64).ln() - mu) / 2.326_347_874;
            let sample = LogNormal::new(mu, sigma.max(0.0)).unwrap().sample(rng);
            (sample.round() as u64).max(1)
        }
    }
}

struct Builder {
    calls: Vec<ApiCall>,
    dev: Device,
}

impl Builder {
    fn push(&mut self, mut c: ApiCall) -> u64 {
        c.seq = self.calls.len() as u64;
        self.calls.push(c);
        self.calls.len() as u64 - 1
    }

    fn base(&self, h: BufferHandle) -> u64 {
        self.dev.get(h).unwrap().base
    }

    fn size(&self, h: BufferHandle) -> u64 {
        self.dev.get(h).unwrap().size
    }

    fn malloc(&mut self, size: u64) -> BufferHandle {
        let h = self.dev.alloc(size).expect("profile fits the generator's device");
        self.push(ApiCall { kind: ApiKind::Malloc, bytes: size, ..Default::default() });
        h
    }

    fn free(&mut self, h: BufferHandle) {
        let base = self.base(h);
        self.dev.free(h).unwrap();
        self.push(ApiCall { kind: ApiKind::Free, args: vec![Arg::ptr(base)], ..Default::default() });
    }

    fn memcpy(&mut self, kind: ApiKind, stream: u32, dst: u64, src: u64, n: u64) {
        self.push(ApiCall {
            kind,
            stream: Some(stream),
            args: vec![Arg::ptr(dst), Arg::ptr(src), Arg::scalar(n, 8)],
            bytes: n,
            ..Default::default()
        });
    }

    fn simple(&mut self, kind: ApiKind, stream: Option<u32>) -> u64 {
        self.push(ApiCall { kind, stream, ..Default::default() })
    }
}

/// Per-iteration view of who may touch what.
struct Ownership {
    /// Buffers stream `s` may write this iteration.
    writable: Vec<Vec<BufferHandle>>,
    /// Buffers stream `s` may read this iteration.
    readable: Vec<Vec<BufferHandle>>,
}

pub fn generate(p: &WorkloadProfile) -> Workload {
    p.validate().expect("valid workload profile");
    let n = p.n_buffers.max(2);
    let mut sizes_rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x51_2E5);
    let mut keys_rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x6E_7A);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let n_param = if p.param_fraction > 0.0 { ((p.param_fraction * n as f64).round() as usize).clamp(1, n - 2) } else { 0 };
    let param_bytes = if n_param > 0 {
        ((p.param_fraction * p.total_bytes as f64) as u64 / 8 * 8).clamp(8 * n_param as u64, p.total_bytes - 8 * (n - n_param) as u64)
    } else {
        0
    };
    let mut sizes = split_bytes(&mut sizes_rng, n_param, param_bytes);
    let mut rest = split_bytes(&mut sizes_rng, n - n_param, p.total_bytes - param_bytes);
    // The two smallest activations serve as input staging and output.
    rest.sort_unstable();
    let (io, body) = rest.split_at(2);
    let mut body = body.to_vec();
    body.shuffle(&mut sizes_rng);
    sizes.extend_from_slice(io);
    sizes.extend(body);

    let capacity = sizes.iter().map(|s| s.next_multiple_of(DEVICE_ALIGN)).sum::<u64>() * 2 + (1 << 24);
    let mut b = Builder { calls: Vec::new(), dev: Device::unbacked(capacity, 1 << 16) };

    for s in 1..p.streams {
        b.simple(ApiKind::StreamCreate, Some(s));
    }
    let handles: Vec<BufferHandle> = sizes.iter().map(|&s| b.malloc(s)).collect();
    let params: Vec<BufferHandle> = handles[..n_param].to_vec();
    let input = handles[n_param];
    let output = handles[n_param + 1];
    let acts: Vec<BufferHandle> = handles[n_param..].to_vec();

    let mut host_next = HOST_BASE;
    let mut host_region = |len: u64| {
        let at = host_next;
        host_next = (at + len).next_multiple_of(HOST_ALIGN);
        at
    };
    for &h in &params {
        let at = host_region(b.size(h));
        b.memcpy(ApiKind::MemcpyH2D, 0, b.base(h), at, b.size(h));
    }
    let input_host = host_region(b.size(input));
    let output_host = host_region(b.size(output));
    if !params.is_empty() {
        b.simple(ApiKind::DeviceSynchronize, None);
    }

    // Fixed per-buffer rank and owner: the same activations are written
    // every iteration, so locality sets nest as `write_locality` grows.
    let keys: Vec<(f64, u32)> = acts.iter().map(|_| (keys_rng.gen::<f64>(), keys_rng.gen_range(0..p.streams))).collect();
    let mut order: Vec<usize> = (2..acts.len()).collect();
    order.sort_by(|&x, &y| keys[x].0.total_cmp(&keys[y].0));
    let n_written = ((p.write_locality * acts.len() as f64).ceil() as usize).saturating_sub(2).min(order.len());
    let mut written = vec![false; acts.len()];
    written[0] = true;
    written[1] = true;
    for &i in &order[..n_written] {
        written[i] = true;
    }

    let per_iter = |it: usize| p.n_kernels / p.iterations + usize::from(it < p.n_kernels % p.iterations);
    let mut iteration_ends = Vec::new();
    let transient = p.streams;
    for it in 0..p.iterations {
        let last = it + 1 == p.iterations;
        let moved = (p.transient_stream && last).then_some(p.streams - 1);
        let remap = |s: u32| if Some(s) == moved { transient } else { s };
        if moved.is_some() {
            b.simple(ApiKind::StreamCreate, Some(transient));
        }
        let n_streams = if moved.is_some() { p.streams + 1 } else { p.streams } as usize;
        let mut own = Ownership { writable: vec![Vec::new(); n_streams], readable: vec![params.clone(); n_streams] };
        for (i, &h) in acts.iter().enumerate() {
            let owner = if i < 2 { 0 } else { keys[i].1 };
            let owner = remap(owner) as usize;
            if written[i] {
                if i != 0 {
                    own.writable[owner].push(h);
                }
                own.readable[owner].push(h);
            } else {
                for r in &mut own.readable {
                    r.push(h);
                }
            }
        }
        let scratch = p.scratch.then(|| {
            let size = rng.gen_range(1..=64u64) * 8;
            let h = b.malloc(size);
            let s0 = remap(0) as usize;
            own.writable[s0].push(h);
            own.readable[s0].push(h);
            h
        });
        let s_io = remap(0);
        b.memcpy(ApiKind::MemcpyH2D, s_io, b.base(input), input_host, b.size(input));

        let active: Vec<u32> = (0..n_streams as u32).filter(|&s| !own.writable[s as usize].is_empty()).collect();
        for _ in 0..per_iter(it) {
            let s = *active.choose(&mut rng).unwrap();
            let roll: f64 = rng.gen();
            if roll < 0.02 {
                b.simple(ApiKind::StreamSynchronize, Some(s));
            } else if roll < 0.04 {
                b.simple(ApiKind::GetDevice, None);
            } else if roll < 0.07 {
                let src = *own.readable[s as usize].choose(&mut rng).unwrap();
                let dst = *own.writable[s as usize].choose(&mut rng).unwrap();
                let len = rng.gen_range(1..=b.size(src).min(b.size(dst)));
                let so = rng.gen_range(0..=b.size(src) - len);
                let d_o = rng.gen_range(0..=b.size(dst) - len);
                b.memcpy(ApiKind::MemcpyD2D, s, b.base(dst) + d_o, b.base(src) + so, len);
            }
            let call = launch(&mut rng, &b, p, s, &own);
            b.push(call);
        }
        b.memcpy(ApiKind::MemcpyD2H, s_io, output_host, b.base(output), b.size(output));
        iteration_ends.push(b.simple(ApiKind::DeviceSynchronize, None));
        if let Some(h) = scratch {
            b.free(h);
        }
        if moved.is_some() {
            b.simple(ApiKind::StreamDestroy, Some(transient));
        }
    }

    Workload { profile: p.clone(), trace: b.calls, iteration_ends, buffer_sizes: sizes, param_buffers: params, input, output }
}

fn launch(rng: &mut ChaCha8Rng, b: &Builder, p: &WorkloadProfile, s: u32, own: &Ownership) -> ApiCall {
    let readable = &own.readable[s as usize];
    let writable = &own.writable[s as usize];
    let duration_ns = duration(rng, p.duration);
    let mut call = ApiCall { kind: ApiKind::LaunchOpaque, stream: Some(s), duration_ns, ..Default::default() };
    let interior = |rng: &mut ChaCha8Rng, h: BufferHandle| b.base(h) + rng.gen_range(0..b.size(h)) / 8 * 8;

    if !rng.gen_bool(p.opaque_fraction) {
        let names: Vec<&str> = known_kernel_names().collect();
        let name = *names.choose(rng).unwrap();
        call.kind = ApiKind::LaunchKnown;
        call.kernel_name = Some(name.into());
        for role in known_signature(name).unwrap() {
            let arg = match role {
                Role::R => {
                    let h = *readable.choose(rng).unwrap();
                    call.true_reads.push(h.0);
                    Arg::ptr(b.base(h))
                }
                Role::W => {
                    let h = *writable.choose(rng).unwrap();
                    call.true_writes.push(h.0);
                    Arg::ptr(b.base(h))
                }
                Role::RW => {
                    let h = *writable.choose(rng).unwrap();
                    call.true_reads.push(h.0);
                    call.true_writes.push(h.0);
                    Arg::ptr(b.base(h))
                }
                Role::S => Arg::scalar(rng.gen_range(1..4096), 4),
            };
            call.args.push(arg);
        }
    } else {
        let n_reads = rng.gen_range(0..=3.min(readable.len()));
        let n_writes = rng.gen_range(1..=2.min(writable.len()));
        for &h in readable.choose_multiple(rng, n_reads) {
            call.true_reads.push(h.0);
            call.args.push(Arg::ptr(interior(rng, h)));
        }
        for &h in writable.choose_multiple(rng, n_writes) {
            call.true_writes.push(h.0);
            call.args.push(Arg::ptr(interior(rng, h)));
        }
        // Scalars, some pointer-sized but never device addresses.
        for _ in 0..rng.gen_range(0..3) {
            let arg = match rng.gen_range(0..3) {
                0 => Arg::scalar(rng.gen_range(0..1 << 20), 4),
                1 => Arg::scalar(rng.gen_range(0..1 << 40), 8),
                _ => Arg::scalar(HOST_BASE + rng.gen_range(0..1 << 20), 8),
            };
            call.args.push(arg);
        }
        call.args.shuffle(rng);
        call.kernel_name = Some((*OPAQUE_NAMES.choose(rng).unwrap()).into());
        if p.adversarial_rate > 0.0 && rng.gen_bool(p.adversarial_rate) {
            let hidden: Vec<BufferHandle> =
                writable.iter().copied().filter(|h| !call.true_writes.contains(&h.0) && !call.true_reads.contains(&h.0)).collect();
            if let Some(h) = hidden.choose(rng) {
                call.true_writes.push(h.0);
                call.kernel_name = Some(ADVERSARIAL_KERNEL.into());
            }
        }
    }
    call.true_reads.sort_unstable();
    call.true_reads.dedup();
    call.true_writes.sort_unstable();
    call.true_writes.dedup();
    call
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speculation::{infer_access, validate, Phase};

    #[test]
    fn split_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for total in [8 * 7, 1_000_003, 6_500_000] {
            let s = split_bytes(&mut rng, 7, total);
            assert_eq!(s.iter().sum::<u64>(), total);
            assert!(s.iter().all(|&x| x >= 8));
        }
    }

    #[test]
    fn desk_counts_are_exact() {
        for name in ["resnet-train", "gpt2-infer", "bert-infer"] {
            let p = WorkloadProfile::desk(name).unwrap();
            let w = generate(&p);
            assert_eq!(w.launches(), p.n_kernels, "{name}");
            assert_eq!(w.trace.iter().filter(|c| c.kind == ApiKind::Malloc).count(), p.n_buffers);
            assert_eq!(w.buffer_sizes.iter().sum::<u64>(), p.total_bytes);
        }
    }

    #[test]
    fn param_bytes_follow_fraction() {
        let p = WorkloadProfile::desk("gpt2-infer").unwrap();
        let w = generate(&p);
        let param: u64 = w.param_buffers.iter().map(|h| w.buffer_sizes[h.0 as usize]).sum();
        let frac = param as f64 / p.total_bytes as f64;
        assert!((frac - p.param_fraction).abs() < 1e-5, "{frac}");
    }

    #[test]
    fn well_behaved_traces_speculate_exactly() {
        for seed in 0..20 {
            let w = generate(&WorkloadProfile::fuzz(seed, 0.0));
            let mut dev = Device::unbacked(1 << 40, 1 << 16);
            for c in &w.trace {
                match c.kind {
                    ApiKind::Malloc => {
                        dev.alloc(c.bytes).unwrap();
                    }
                    ApiKind::Free => dev.free(dev.lookup(c.args[0].v).unwrap()).unwrap(),
                    k if k.is_launch() => {
                        let spec = infer_access(c, &dev);
                        assert!(validate(0, c, &spec, Phase::Restore).ok, "seed {seed} call {}", c.seq);
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let p = WorkloadProfile::fuzz(11, 0.1);
        assert_eq!(generate(&p).trace, generate(&p).trace);
    }
}
