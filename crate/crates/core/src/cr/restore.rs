//! Restore: full (load everything, replay, then admit) or on demand (admit
//! immediately, load what each kernel needs ahead of the background order).
//!
//! A restore-phase validation failure on a kernel that touched a buffer
//! before it was loaded triggers a repair: the affected buffers are reloaded
//! and every logged op that depends on them is re-executed.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ContextPool, RestoreMode};
use crate::api::ApiCall;
use crate::config::Config;
use crate::dag::NodeId;
use crate::image::{CheckpointImage, GpuRecord, ImageError};
use crate::process::{Blocker, OpMeta, OpOrigin, Process, ProcessError, Result};
use crate::sim::{BufferHandle, Channel, ChunkDone, JobId, Machine, OpId, Priority, SimTime, StreamId, Until, Upstream, Work};
use crate::speculation::{infer_access, AccessSpec, Confidence};

/// Stream used for re-executing repaired ops.
pub const REPAIR_STREAM: StreamId = StreamId(u32::MAX);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RestoreStats {
    pub acquire_ns: u64,
    /// Absolute time the first kernel started.
    pub first_kernel_ns: Option<u64>,
    pub loads_done_ns: Option<u64>,
    pub end_ns: Option<u64>,
    pub bytes_loaded: u64,
    pub premature_starts: u64,
    pub repairs: u64,
    pub replayed: u64,
    pub reexecuted: u64,
}

#[derive(Debug, Clone)]
struct LogEntry {
    op: OpId,
    start: SimTime,
    work: Work,
    call: Arc<ApiCall>,
    reads: BTreeSet<BufferHandle>,
    writes: BTreeSet<BufferHandle>,
    /// Host pages written (device-to-host copies).
    pages: BTreeSet<u64>,
}

impl LogEntry {
    fn accesses(&self) -> impl Iterator<Item = &BufferHandle> {
        self.reads.iter().chain(&self.writes)
    }
}

#[derive(Debug)]
enum Repair {
    Draining { seeds: BTreeSet<OpId> },
    Running { left: usize },
}

#[derive(Debug)]
pub(crate) struct RestoreCtx {
    mode: RestoreMode,
    image: Arc<CheckpointImage>,
    loaded: HashMap<BufferHandle, Option<SimTime>>,
    jobs: HashMap<JobId, BufferHandle>,
    buf_job: HashMap<BufferHandle, JobId>,
    loads_left: usize,
    admitted: bool,
    log: Vec<LogEntry>,
    repair: Option<Repair>,
    pub(crate) stats: RestoreStats,
}

impl RestoreCtx {
    pub(crate) fn gate_closed(&self) -> bool {
        self.mode == RestoreMode::Full && !self.admitted
    }

    fn is_loaded(&self, h: BufferHandle) -> bool {
        self.loaded.get(&h).is_none_or(|t| t.is_some())
    }
}

impl Process {
    /// Recreates a process from `image`. The trace continues after the
    /// image's cursor.
    pub fn restore(
        cfg: Config,
        image: &CheckpointImage,
        trace: impl Into<Arc<[Arc<ApiCall>]>>,
        mode: RestoreMode,
        pool: &mut ContextPool,
    ) -> Result<Process> {
        image.check().map_err(|e| ProcessError::Image(ImageError::InvariantViolation(e)))?;
        let mut m = Machine::new(&cfg);
        let acquire_ns = pool.acquire();
        m.run_until(Until::Time(acquire_ns))?;
        for (idx, data) in &image.host_pages {
            m.host.install_page(*idx, data.clone());
        }
        for a in &image.allocs {
            m.dev.alloc_at(a.handle, a.base, a.size)?;
        }
        m.dev.set_next(image.next_handle, image.next_addr);
        for s in &image.streams {
            m.create_stream(StreamId(*s));
        }
        let mut p = Process::with_machine(cfg, m, trace.into());
        p.next_call = image.cursor.map_or(0, |c| c as usize + 1);
        p.dag = image.dag.clone();
        p.dag.retained = false;
        p.dag.set_gc(true);
        let mut ctx = RestoreCtx {
            mode,
            image: Arc::new(image.clone()),
            loaded: HashMap::new(),
            jobs: HashMap::new(),
            buf_job: HashMap::new(),
            loads_left: 0,
            admitted: false,
            log: Vec::new(),
            repair: None,
            stats: RestoreStats { acquire_ns, ..Default::default() },
        };
        let universe: Vec<BufferHandle> = image.allocs.iter().map(|a| a.handle).collect();
        for h in p.dag.topo_order_buffers(&universe) {
            let size = image.alloc(h).expect("allocated").size;
            match image.gpu[&h] {
                GpuRecord::Recompute(_) => {
                    ctx.loaded.insert(h, Some(acquire_ns));
                }
                _ => {
                    let job = p.m.transfer_raw(Channel::Pcie, size, Priority::Ckpt);
                    ctx.jobs.insert(job, h);
                    ctx.buf_job.insert(h, job);
                    ctx.loaded.insert(h, None);
                    ctx.loads_left += 1;
                }
            }
        }
        let full_wait = mode == RestoreMode::Full && ctx.loads_left > 0;
        p.restore = Some(ctx);
        for id in p.dag.pending_topo_order() {
            let k = p.dag.kernel(id).unwrap();
            let call = k.call.clone();
            let stream = StreamId(k.stream);
            let spec = infer_access(&call, &p.m.dev);
            let validated = spec.confidence == Confidence::Speculated;
            let mut blockers: Vec<Blocker> = p.dag.kernel_preds(id).into_iter().map(Blocker::Pred).collect();
            blockers.extend(p.load_blockers(&spec));
            if full_wait {
                blockers.push(Blocker::FullLoad);
            }
            let (mut work, h2d_src) = p.build_work(&call)?;
            if let Work::Kernel { duration_ns, .. } = &mut work {
                *duration_ns = p.kernel_duration(&call, validated);
            }
            let meta = OpMeta { call, node: Some(id), spec, stream, work, validated, origin: OpOrigin::Replay, started_at: None, h2d_src };
            p.submit_meta(meta, blockers)?;
            p.restore.as_mut().unwrap().stats.replayed += 1;
        }
        Ok(p)
    }

    pub fn restore_stats(&self) -> Option<RestoreStats> {
        self.restore.as_ref().map(|r| r.stats).or(self.finished_restore)
    }

    fn rctx(&mut self) -> &mut RestoreCtx {
        self.restore.as_mut().expect("restore active")
    }

    /// Load blockers for the unloaded buffers of `spec`, promoting their loads.
    fn load_blockers(&mut self, spec: &AccessSpec) -> Vec<Blocker> {
        let Some(r) = self.restore.as_ref() else { return Vec::new() };
        let missing: Vec<BufferHandle> = spec.all().into_iter().filter(|h| !r.is_loaded(*h)).collect();
        for h in &missing {
            if let Some(job) = r.buf_job.get(h) {
                self.m.promote_job(Channel::Pcie, *job);
            }
        }
        missing.into_iter().map(Blocker::Load).collect()
    }

    /// Blockers for an application op issued while a restore is active.
    pub(crate) fn restore_blockers(&mut self, node: NodeId, spec: &AccessSpec) -> Vec<Blocker> {
        if self.restore.is_none() {
            return Vec::new();
        }
        let mut b = self.load_blockers(spec);
        for p in self.dag.kernel_preds(node) {
            if let Some(op) = self.node_op.get(&p) {
                if self.ops.get(op).is_some_and(|m| m.origin == OpOrigin::Replay) {
                    b.push(Blocker::Pred(p));
                }
            }
        }
        if self.restore.as_ref().unwrap().repair.is_some() {
            b.push(Blocker::Repair);
        }
        b
    }

    pub(crate) fn restore_on_malloc(&mut self, h: BufferHandle) {
        let now = self.m.now();
        if let Some(r) = self.restore.as_mut() {
            r.loaded.insert(h, Some(now));
        }
    }

    pub(crate) fn restore_on_started(&mut self, op: OpId, at: SimTime) {
        let Some(meta) = self.ops.get(&op) else { return };
        let kernel = matches!(meta.work, Work::Kernel { .. }) && meta.origin != OpOrigin::Hidden;
        let Some(r) = self.restore.as_mut() else {
            if let Some(st) = self.finished_restore.as_mut().filter(|_| kernel) {
                st.first_kernel_ns.get_or_insert(at);
            }
            return;
        };
        if kernel {
            r.stats.first_kernel_ns.get_or_insert(at);
        }
        if meta.origin != OpOrigin::Hidden {
            let truth: Vec<BufferHandle> = match &meta.work {
                Work::Kernel { .. } => meta.call.true_reads.iter().chain(&meta.call.true_writes).map(|h| BufferHandle(*h)).collect(),
                _ => meta.spec.all().into_iter().collect(),
            };
            if truth.iter().any(|h| !r.is_loaded(*h)) {
                r.stats.premature_starts += 1;
            }
        }
        let pages = match meta.work {
            Work::D2H { len, host_addr, .. } => self.m.host.page_range(host_addr, len).collect(),
            _ => BTreeSet::new(),
        };
        r.log.push(LogEntry {
            op,
            start: at,
            work: meta.work.clone(),
            call: meta.call.clone(),
            reads: meta.spec.reads.clone(),
            writes: meta.spec.writes.clone(),
            pages,
        });
    }

    pub(crate) fn restore_on_chunk(&mut self, channel: Channel, done: ChunkDone) -> Result<()> {
        let Some(r) = self.restore.as_mut() else { return Ok(()) };
        if channel != Channel::Pcie || done.cancelled {
            return Ok(());
        }
        let Some(h) = r.jobs.get(&done.job).copied() else { return Ok(()) };
        let (a, n) = (done.offset, done.len);
        let data = match &r.image.gpu[&h] {
            GpuRecord::Inline(b) => b[a as usize..(a + n) as usize].to_vec(),
            GpuRecord::DedupRef { host_addr, .. } => r.image.host_read(host_addr + a, n),
            GpuRecord::Recompute(_) => vec![0; n as usize],
        };
        r.stats.bytes_loaded += n;
        self.m.dev.active_mut(h)?.write_at(a, &data);
        if done.complete {
            let now = self.m.now();
            let r = self.rctx();
            r.jobs.remove(&done.job);
            r.buf_job.remove(&h);
            r.loaded.insert(h, Some(now));
            r.loads_left -= 1;
            if let GpuRecord::DedupRef { host_addr, len, crc } = r.image.gpu[&h] {
                self.m.dev.active_mut(h)?.upstream = Some(Upstream { host_addr, len, crc });
            }
            if self.rctx().loads_left == 0 {
                self.rctx().stats.loads_done_ns = Some(now);
                self.unblock(Blocker::FullLoad);
            }
            self.unblock(Blocker::Load(h));
        }
        Ok(())
    }

    pub(crate) fn restore_on_done(&mut self, op: OpId, meta: &OpMeta, missed: &BTreeSet<BufferHandle>) -> Result<()> {
        let Some(r) = self.restore.as_mut() else { return Ok(()) };
        if let Some(e) = r.log.iter_mut().rev().find(|e| e.op == op) {
            e.reads.extend(missed.iter().copied());
            e.writes.extend(missed.iter().copied());
        }
        if let Some(Repair::Running { left }) = &mut r.repair {
            if meta.origin == OpOrigin::Hidden {
                *left -= 1;
                if *left == 0 {
                    r.repair = None;
                    r.stats.repairs += 1;
                    self.m.destroy_stream(REPAIR_STREAM)?;
                    self.unblock(Blocker::Repair);
                }
            }
            return Ok(());
        }
        let Some(start) = meta.started_at else { return Ok(()) };
        let touched_early = missed.iter().any(|h| r.loaded.get(h).is_some_and(|t| t.is_none_or(|t| t > start)));
        if !touched_early {
            return Ok(());
        }
        match &mut r.repair {
            Some(Repair::Draining { seeds }) => {
                seeds.insert(op);
            }
            _ => {
                r.repair = Some(Repair::Draining { seeds: BTreeSet::from([op]) });
                let waiting: Vec<OpId> = self.ops.keys().copied().filter(|o| !self.m.is_started(*o)).collect();
                for o in waiting {
                    self.hold(o, Blocker::Repair);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn restore_tick(&mut self) -> Result<()> {
        let Some(r) = self.restore.as_ref() else { return Ok(()) };
        if matches!(r.repair, Some(Repair::Draining { .. })) && self.m.running_ops() == 0 {
            self.run_repair()?;
        }
        let r = self.restore.as_ref().unwrap();
        let replay_pending = self.ops.values().any(|m| m.origin != OpOrigin::App);
        if r.mode == RestoreMode::Full && !r.admitted && r.loads_left == 0 && !replay_pending {
            self.rctx().admitted = true;
            self.changed = true;
        }
        let r = self.restore.as_ref().unwrap();
        let validating = self.ops.values().any(|m| m.validated || m.origin != OpOrigin::App);
        if r.loads_left == 0 && r.repair.is_none() && !validating && (r.mode == RestoreMode::OnDemand || r.admitted) {
            let now = self.m.now();
            let mut ctx = self.restore.take().unwrap();
            ctx.stats.end_ns = Some(now);
            self.finished_restore = Some(ctx.stats);
            self.changed = true;
        }
        Ok(())
    }

    /// Rolls back the failed ops and everything entangled with them, then
    /// re-executes them from reloaded inputs.
    fn run_repair(&mut self) -> Result<()> {
        let r = self.restore.as_mut().unwrap();
        let Some(Repair::Draining { seeds }) = r.repair.take() else { unreachable!() };
        let mut in_r: Vec<bool> = r.log.iter().map(|e| seeds.contains(&e.op)).collect();
        loop {
            let mut changed = false;
            let mut w_bufs = BTreeSet::new();
            let mut w_pages = BTreeSet::new();
            let mut l_bufs = BTreeSet::new();
            for (e, _) in r.log.iter().zip(&in_r).filter(|(_, x)| **x) {
                w_bufs.extend(e.writes.iter().copied());
                w_pages.extend(e.pages.iter().copied());
                l_bufs.extend(e.accesses().copied());
            }
            for (e, x) in r.log.iter().zip(in_r.iter_mut()) {
                if *x {
                    continue;
                }
                let touches_w = e.accesses().any(|h| w_bufs.contains(h)) || e.pages.iter().any(|p| w_pages.contains(p));
                let writes_l = e.writes.iter().any(|h| l_bufs.contains(h));
                if touches_w || writes_l {
                    *x = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut redo: Vec<LogEntry> = Vec::new();
        let mut keep = Vec::new();
        for (e, x) in std::mem::take(&mut r.log).into_iter().zip(in_r) {
            if x {
                redo.push(e);
            } else {
                keep.push(e);
            }
        }
        r.log = keep;
        redo.sort_by_key(|e| (e.start, e.op));
        let reload: BTreeSet<BufferHandle> = redo.iter().flat_map(|e| e.accesses().copied()).collect();
        let now = self.m.now();
        for h in &reload {
            let r = self.restore.as_mut().unwrap();
            if let Some(job) = r.buf_job.remove(h) {
                r.jobs.remove(&job);
                r.loads_left -= 1;
                self.m.cancel_job(Channel::Pcie, job);
            }
            let r = self.restore.as_mut().unwrap();
            let size = self.m.dev.active(*h)?.size;
            match r.image.gpu.get(h) {
                Some(GpuRecord::Inline(_) | GpuRecord::DedupRef { .. }) => {
                    let job = self.m.transfer_raw(Channel::Pcie, size, Priority::App);
                    r.jobs.insert(job, *h);
                    r.buf_job.insert(*h, job);
                    r.loaded.insert(*h, None);
                    r.loads_left += 1;
                }
                _ => {
                    let b = self.m.dev.active_mut(*h)?;
                    b.bytes_mut().fill(0);
                    b.upstream = None;
                    r.loaded.insert(*h, Some(now));
                }
            }
        }
        self.m.create_stream(REPAIR_STREAM);
        let n = redo.len();
        self.rctx().stats.reexecuted += n as u64;
        self.rctx().repair = Some(Repair::Running { left: n });
        for e in redo {
            let mut work = e.work.clone();
            if let Work::Kernel { duration_ns, call } = &mut work {
                *duration_ns = call.duration_ns;
            }
            let spec = AccessSpec { reads: e.reads.clone(), writes: e.writes.clone(), confidence: Confidence::Exact };
            let blockers = self.load_blockers(&spec);
            let meta = OpMeta {
                call: e.call.clone(),
                node: None,
                spec,
                stream: REPAIR_STREAM,
                work,
                validated: false,
                origin: OpOrigin::Hidden,
                started_at: None,
                h2d_src: None,
            };
            self.submit_meta(meta, blockers)?;
        }
        if n == 0 {
            self.rctx().repair = None;
            self.m.destroy_stream(REPAIR_STREAM)?;
            self.unblock(Blocker::Repair);
        }
        self.changed = true;
        Ok(())
    }
}
