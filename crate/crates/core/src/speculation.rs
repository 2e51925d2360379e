//! Buffer-access inference from raw API arguments, and its validation.
//!
//! Memory moves and known library kernels have exact access sets. Opaque
//! kernels are speculated: any 8-byte argument whose value lands inside an
//! Active allocation is taken as both read and written. Validation compares
//! a speculation against the device model's ground truth.

use std::collections::BTreeSet;

use crate::api::{known_signature, ApiCall, ApiKind, Role};
use crate::sim::{BufferHandle, Device};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelClass {
    MemoryMove,
    Known,
    Opaque,
    NonDataflow,
}

pub fn classify(call: &ApiCall) -> KernelClass {
    match call.kind {
        ApiKind::MemcpyH2D | ApiKind::MemcpyD2H | ApiKind::MemcpyD2D => KernelClass::MemoryMove,
        ApiKind::LaunchKnown => KernelClass::Known,
        ApiKind::LaunchOpaque => KernelClass::Opaque,
        _ => KernelClass::NonDataflow,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Confidence {
    Exact,
    Speculated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessSpec {
    pub reads: BTreeSet<BufferHandle>,
    pub writes: BTreeSet<BufferHandle>,
    pub confidence: Confidence,
}

impl AccessSpec {
    pub fn empty(confidence: Confidence) -> Self {
        Self { reads: BTreeSet::new(), writes: BTreeSet::new(), confidence }
    }

    pub fn all(&self) -> BTreeSet<BufferHandle> {
        self.reads.union(&self.writes).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Only writes are checked.
    Checkpoint,
    /// Reads and writes are checked.
    Restore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub node: u64,
    pub ok: bool,
    pub missed: BTreeSet<BufferHandle>,
    pub phase: Phase,
}

pub fn infer_access(call: &ApiCall, dev: &Device) -> AccessSpec {
    match classify(call) {
        KernelClass::MemoryMove => {
            let mut spec = AccessSpec::empty(Confidence::Exact);
            if let Some((dst, src, _)) = call.copy_args() {
                match call.kind {
                    ApiKind::MemcpyH2D => spec.writes.extend(dev.lookup(dst)),
                    ApiKind::MemcpyD2H => spec.reads.extend(dev.lookup(src)),
                    _ => {
                        spec.reads.extend(dev.lookup(src));
                        spec.writes.extend(dev.lookup(dst));
                    }
                }
            }
            spec
        }
        KernelClass::Known => match call.kernel_name.as_deref().and_then(known_signature) {
            Some(roles) => {
                let mut spec = AccessSpec::empty(Confidence::Exact);
                for (arg, role) in call.args.iter().zip(roles) {
                    let Some(h) = dev.lookup(arg.v) else { continue };
                    match role {
                        Role::R => {
                            spec.reads.insert(h);
                        }
                        Role::W => {
                            spec.writes.insert(h);
                        }
                        Role::RW => {
                            spec.reads.insert(h);
                            spec.writes.insert(h);
                        }
                        Role::S => {}
                    }
                }
                spec
            }
            // A name missing from the table gets the opaque treatment.
            None => speculate(call, dev),
        },
        KernelClass::Opaque => speculate(call, dev),
        KernelClass::NonDataflow => AccessSpec::empty(Confidence::Exact),
    }
}

fn speculate(call: &ApiCall, dev: &Device) -> AccessSpec {
    let mut spec = AccessSpec::empty(Confidence::Speculated);
    for arg in call.args.iter().filter(|a| a.size == 8) {
        if let Some(h) = dev.lookup(arg.v) {
            spec.reads.insert(h);
            spec.writes.insert(h);
        }
    }
    spec
}

pub fn validate(node: u64, call: &ApiCall, spec: &AccessSpec, phase: Phase) -> ValidationReport {
    let truth = |v: &[u32]| v.iter().map(|h| BufferHandle(*h)).collect::<BTreeSet<_>>();
    let missed: BTreeSet<BufferHandle> = match phase {
        Phase::Checkpoint => truth(&call.true_writes).difference(&spec.writes).copied().collect(),
        Phase::Restore => {
            let mut t = truth(&call.true_writes);
            t.extend(truth(&call.true_reads));
            t.difference(&spec.all()).copied().collect()
        }
    };
    ValidationReport { node, ok: missed.is_empty(), missed, phase }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::Arg;
    use crate::config::DEVICE_ADDR_BASE;

    fn dev_with(sizes: &[u64]) -> (Device, Vec<BufferHandle>) {
        let mut d = Device::new(1 << 30, 4096);
        let hs = sizes.iter().map(|s| d.alloc(*s).unwrap()).collect();
        (d, hs)
    }

    fn set(v: &[BufferHandle]) -> BTreeSet<BufferHandle> {
        v.iter().copied().collect()
    }

    #[test]
    fn vec_add_arguments() {
        // Place a and b at the documented addresses.
        let mut d = Device::new(1 << 30, 4096);
        let pad = d.alloc(0xA000).unwrap();
        let a = d.alloc(0x1000).unwrap();
        let b = d.alloc(0x1000).unwrap();
        assert_eq!(d.get(a).unwrap().base, 0x7000_0000_A000);
        assert_eq!(d.get(b).unwrap().base, 0x7000_0000_B000);
        let call = ApiCall {
            kind: ApiKind::LaunchOpaque,
            args: vec![Arg::ptr(0x7000_0000_A000), Arg::ptr(0x7000_0000_B000), Arg::ptr(1024)],
            ..Default::default()
        };
        let s = infer_access(&call, &d);
        assert_eq!(s.reads, set(&[a, b]));
        assert_eq!(s.writes, set(&[a, b]));
        assert_eq!(s.confidence, Confidence::Speculated);
        assert!(!s.all().contains(&pad));
    }

    #[test]
    fn no_pointer_sized_args_means_empty_speculation() {
        let (d, _) = dev_with(&[64]);
        let call = ApiCall { kind: ApiKind::LaunchOpaque, args: vec![Arg::scalar(DEVICE_ADDR_BASE, 4)], ..Default::default() };
        let s = infer_access(&call, &d);
        assert!(s.reads.is_empty() && s.writes.is_empty());
    }

    #[test]
    fn freed_buffer_is_not_matched() {
        let (mut d, h) = dev_with(&[64, 64]);
        d.free(h[0]).unwrap();
        let call = ApiCall { kind: ApiKind::LaunchOpaque, args: vec![Arg::ptr(DEVICE_ADDR_BASE)], ..Default::default() };
        assert!(infer_access(&call, &d).all().is_empty());
    }

    #[test]
    fn memcpy_and_known_are_exact() {
        let (d, h) = dev_with(&[256, 256, 256]);
        let base = |i: usize| d.get(h[i]).unwrap().base;
        let d2d = ApiCall {
            kind: ApiKind::MemcpyD2D,
            args: vec![Arg::ptr(base(1)), Arg::ptr(base(0) + 16), Arg::scalar(64, 8)],
            ..Default::default()
        };
        let s = infer_access(&d2d, &d);
        assert_eq!((s.reads.clone(), s.writes.clone()), (set(&[h[0]]), set(&[h[1]])));
        assert_eq!(s.confidence, Confidence::Exact);
        let gemm = ApiCall {
            kind: ApiKind::LaunchKnown,
            kernel_name: Some("cublasSgemm".into()),
            args: vec![Arg::ptr(base(0)), Arg::ptr(base(1)), Arg::ptr(base(2)), Arg::scalar(8, 4), Arg::scalar(8, 4), Arg::scalar(8, 4)],
            ..Default::default()
        };
        let s = infer_access(&gemm, &d);
        assert_eq!(s.reads, set(&h));
        assert_eq!(s.writes, set(&[h[2]]));
    }

    #[test]
    fn classification_examples() {
        let c = |kind| classify(&ApiCall { kind, ..Default::default() });
        assert_eq!(c(ApiKind::MemcpyD2H), KernelClass::MemoryMove);
        assert_eq!(c(ApiKind::LaunchKnown), KernelClass::Known);
        assert_eq!(c(ApiKind::LaunchOpaque), KernelClass::Opaque);
        assert_eq!(c(ApiKind::GetDevice), KernelClass::NonDataflow);
    }

    #[test]
    fn validation_phases() {
        let (a, b, c) = (BufferHandle(0), BufferHandle(1), BufferHandle(2));
        let spec = AccessSpec { reads: set(&[a, b]), writes: set(&[a, b]), confidence: Confidence::Speculated };
        let call = |r: Vec<u32>, w: Vec<u32>| ApiCall { true_reads: r, true_writes: w, ..Default::default() };
        assert!(validate(0, &call(vec![], vec![1]), &spec, Phase::Checkpoint).ok);
        let r = validate(0, &call(vec![], vec![2]), &spec, Phase::Checkpoint);
        assert!(!r.ok);
        assert_eq!(r.missed, set(&[c]));
        // A missed read only matters on restore.
        assert!(validate(0, &call(vec![2], vec![0]), &spec, Phase::Checkpoint).ok);
        assert_eq!(validate(0, &call(vec![2], vec![0]), &spec, Phase::Restore).missed, set(&[c]));
    }
}
