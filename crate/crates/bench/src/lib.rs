//! Shared fixtures for the benchmarks.

use std::collections::BTreeSet;
use std::sync::Arc;

use gpucr::api::{ApiCall, ApiKind};
use gpucr::cr::{Action, CkptMode};
use gpucr::dag::KernelDag;
use gpucr::harness::{generate, trigger_seq, Workload, WorkloadProfile};
use gpucr::image::CheckpointImage;
use gpucr::process::{Process, Trigger};
use gpucr::sim::{BufferHandle, Device};

pub fn desk(name: &str) -> Workload {
    generate(&WorkloadProfile::desk(name).expect("known profile"))
}

/// A DAG of `n` kernels over `bufs` buffers, each reading two and writing one.
pub fn chain_dag(n: usize, bufs: usize) -> KernelDag {
    let mut dev = Device::new(1 << 30, 4096);
    let hs: Vec<BufferHandle> = (0..bufs).map(|_| dev.alloc(4096).unwrap()).collect();
    let mut g = KernelDag::new();
    for i in 0..n {
        let call = Arc::new(ApiCall { seq: i as u64, kind: ApiKind::LaunchKnown, stream: Some((i % 4) as u32), ..Default::default() });
        let r = BTreeSet::from([hs[i % bufs], hs[(i * 7 + 3) % bufs]]);
        let w = BTreeSet::from([hs[(i * 13 + 1) % bufs]]);
        g.add_kernel(call, &r, &w, &dev).unwrap();
    }
    g
}

/// The image a checkpoint of `w` halfway through its launches produces.
pub fn image_of(w: &Workload, mode: CkptMode) -> CheckpointImage {
    let mut p = Process::new(Default::default(), w.shared_trace());
    p.add_trigger(Trigger::At(trigger_seq(&w.trace, 0.5)), Action::checkpoint(mode));
    p.run().unwrap();
    p.images.swap_remove(0)
}

/// Allocation table after replaying the trace's mallocs and frees before `seq`.
pub fn device_at(trace: &[ApiCall], seq: u64) -> Device {
    let mut dev = Device::unbacked(1 << 40, 4096);
    for c in trace.iter().take_while(|c| c.seq < seq) {
        match c.kind {
            ApiKind::Malloc => {
                dev.alloc(c.bytes).unwrap();
            }
            ApiKind::Free => {
                let h = dev.lookup(c.args[0].v).expect("freed pointer is allocated");
                dev.free(h).unwrap();
            }
            _ => {}
        }
    }
    dev
}
