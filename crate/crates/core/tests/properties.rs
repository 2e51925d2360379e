use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use gpucr::api::{ApiCall, ApiKind, Arg};
use gpucr::cr::CkptMode;
use gpucr::dag::KernelDag;
use gpucr::harness::{compare_oracle, fuzz_config, generate, WorkloadProfile};
use gpucr::sim::effects::mix;
use gpucr::sim::{BufferHandle, ChunkDone, Device, JobId, Link, Priority};
use gpucr::speculation::{infer_access, Confidence};
use proptest::prelude::*;

const N_BUFS: usize = 6;

#[derive(Debug, Clone)]
struct K {
    stream: u32,
    reads: BTreeSet<usize>,
    writes: BTreeSet<usize>,
}

fn kernel() -> impl Strategy<Value = K> {
    (0u32..3, prop::collection::btree_set(0..N_BUFS, 0..3), prop::collection::btree_set(0..N_BUFS, 0..3))
        .prop_map(|(stream, reads, writes)| K { stream, reads, writes })
}

fn build(ks: &[K]) -> (KernelDag, Vec<gpucr::dag::NodeId>) {
    let mut dev = Device::new(1 << 20, 4096);
    let hs: Vec<BufferHandle> = (0..N_BUFS).map(|_| dev.alloc(64).unwrap()).collect();
    let mut g = KernelDag::new();
    let ids = ks
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let call = Arc::new(ApiCall { seq: i as u64, kind: ApiKind::LaunchKnown, stream: Some(k.stream), ..Default::default() });
            let r = k.reads.iter().map(|b| hs[*b]).collect();
            let w = k.writes.iter().map(|b| hs[*b]).collect();
            g.add_kernel(call, &r, &w, &dev).unwrap()
        })
        .collect();
    (g, ids)
}

/// Two kernels must keep their trace order when they share a stream or one
/// writes what the other touches.
fn conflict(a: &K, b: &K) -> bool {
    a.stream == b.stream
        || a.writes.iter().any(|x| b.reads.contains(x) || b.writes.contains(x))
        || b.writes.iter().any(|x| a.reads.contains(x))
}

/// Each kernel overwrites its outputs with a hash of its inputs.
fn replay(ks: &[K], order: &[usize]) -> [u64; N_BUFS] {
    let mut mem = [0u64; N_BUFS];
    for &i in order {
        let k = &ks[i];
        let h = k.reads.iter().fold(mix(i as u64), |acc, r| mix(acc ^ mem[*r]));
        for w in &k.writes {
            mem[*w] = mix(h ^ *w as u64);
        }
    }
    mem
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dag_order_respects_every_conflict(ks in prop::collection::vec(kernel(), 1..24)) {
        let (g, ids) = build(&ks);
        prop_assert!(g.is_acyclic());
        let order = g.pending_topo_order();
        prop_assert_eq!(order.len(), ks.len());
        let pos: BTreeMap<_, usize> = order.iter().enumerate().map(|(p, id)| (*id, p)).collect();
        for i in 0..ks.len() {
            for j in i + 1..ks.len() {
                if conflict(&ks[i], &ks[j]) {
                    prop_assert!(pos[&ids[i]] < pos[&ids[j]], "kernels {} and {} reordered", i, j);
                }
            }
        }
    }

    #[test]
    fn dag_order_replays_to_trace_order_state(ks in prop::collection::vec(kernel(), 1..24)) {
        let (g, ids) = build(&ks);
        let index: BTreeMap<_, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let topo: Vec<usize> = g.pending_topo_order().iter().map(|id| index[id]).collect();
        let trace: Vec<usize> = (0..ks.len()).collect();
        prop_assert_eq!(replay(&ks, &topo), replay(&ks, &trace));
    }

    #[test]
    fn dag_wire_round_trip(ks in prop::collection::vec(kernel(), 1..16), done in 0usize..16) {
        let (mut g, ids) = build(&ks);
        for id in g.pending_topo_order().into_iter().take(done) {
            g.mark_running(id).unwrap();
            g.on_kernel_complete(id).unwrap();
        }
        let bytes = g.serialize();
        let back = KernelDag::deserialize(&bytes).unwrap();
        prop_assert_eq!(back.serialize(), bytes);
        prop_assert_eq!(back.pending_topo_order(), g.pending_topo_order());
        prop_assert!(ids.len() >= back.kernel_count());
    }

    #[test]
    fn allocations_never_overlap(ops in prop::collection::vec((1u64..5000, any::<bool>()), 1..60)) {
        let mut dev = Device::new(1 << 30, 4096);
        let mut live: Vec<BufferHandle> = Vec::new();
        let mut issued = 0u32;
        for (size, free) in ops {
            if free && !live.is_empty() {
                let h = live.remove(size as usize % live.len());
                dev.free(h).unwrap();
            } else {
                let h = dev.alloc(size).unwrap();
                prop_assert_eq!(h.0, issued);
                issued += 1;
                live.push(h);
            }
            let mut table = dev.allocation_table();
            table.sort_by_key(|(_, base, _)| *base);
            for w in table.windows(2) {
                prop_assert!(w[0].1 + w[0].2 <= w[1].1);
            }
            prop_assert!(table.iter().all(|(_, base, _)| base % gpucr::config::DEVICE_ALIGN == 0));
            prop_assert_eq!(table.len(), live.len());
            prop_assert!(dev.check_invariants().is_ok());
        }
    }

    #[test]
    fn speculation_matches_allocation_scan(
        sizes in prop::collection::vec(1u64..3000, 1..12),
        picks in prop::collection::vec((any::<prop::sample::Index>(), -300i64..3300, prop_oneof![Just(8u32), Just(4u32)]), 0..10),
    ) {
        let mut dev = Device::new(1 << 30, 4096);
        let hs: Vec<BufferHandle> = sizes.iter().map(|s| dev.alloc(*s).unwrap()).collect();
        let table = dev.allocation_table();
        let args: Vec<Arg> = picks
            .iter()
            .map(|(i, off, size)| {
                let (_, base, _) = table[i.index(table.len())];
                Arg::scalar(base.wrapping_add_signed(*off), *size)
            })
            .collect();
        let call = ApiCall { kind: ApiKind::LaunchOpaque, kernel_name: Some("k".into()), args: args.clone(), ..Default::default() };
        let spec = infer_access(&call, &dev);
        let want: BTreeSet<BufferHandle> = args
            .iter()
            .filter(|a| a.size == 8)
            .filter_map(|a| table.iter().find(|(_, base, len)| *base <= a.v && a.v < base + len).map(|(h, _, _)| *h))
            .collect();
        prop_assert_eq!(spec.confidence, Confidence::Speculated);
        prop_assert_eq!(&spec.reads, &want);
        prop_assert_eq!(&spec.writes, &want);
        prop_assert!(want.iter().all(|h| hs.contains(h)));
    }

    #[test]
    fn priority_never_delays_app_transfers(jobs in prop::collection::vec((1u64..20_000, any::<bool>()), 1..12)) {
        let finish = |blind: bool| {
            let mut link = Link::new(1_000_000_000, 4096);
            if blind {
                link = link.priority_blind();
            }
            for (i, (bytes, app)) in jobs.iter().enumerate() {
                link.enqueue(JobId(i as u64), *bytes, if *app { Priority::App } else { Priority::Ckpt });
            }
            let mut done = BTreeMap::new();
            let mut now = 0;
            while let Some(t) = link.start_next(now) {
                now = t;
                if let Some(ChunkDone { job, complete: true, .. }) = link.finish_chunk() {
                    done.insert(job, now);
                }
            }
            (done, link.busy_ns())
        };
        let (with, busy) = finish(false);
        let (without, busy_blind) = finish(true);
        prop_assert_eq!(busy, busy_blind);
        prop_assert_eq!(with.values().max(), without.values().max());
        for (i, (_, app)) in jobs.iter().enumerate() {
            if *app {
                let id = JobId(i as u64);
                prop_assert!(with[&id] <= without[&id]);
            }
        }
    }

    #[test]
    fn checkpoint_at_any_call_restores_sequential_state(seed in 0u64..1_000_000, at in 0.0f64..1.0, mode in 0usize..3) {
        let w = generate(&WorkloadProfile::fuzz(seed, 0.0));
        let at = (w.trace.len() as f64 * at) as u64;
        let mode = [CkptMode::StopTheWorld, CkptMode::Cow, CkptMode::DirtyBit][mode];
        let r = compare_oracle(&fuzz_config(seed), &w.trace, at, mode);
        prop_assert!(r.is_ok(), "{:?}", r.err());
    }
}
