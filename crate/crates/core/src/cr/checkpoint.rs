//! Checkpoint sessions: stop-the-world, soft CoW and soft dirty-bit.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Action, CkptMode, MetricsReport};
use crate::api::ApiCall;
use crate::config::Coordination;
use crate::dag::{KernelState, Scope};
use crate::image::{write_image, AllocRecord, CheckpointImage, GpuRecord, ImageError, ImageKind};
use crate::process::{Block, Blocker, OpMeta, Process, ProcessError, Result};
use crate::sim::{BufferHandle, Channel, ChunkDone, ChunkState, JobId, OpId, Priority, SimTime, Upstream};
use crate::speculation::AccessSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// Gate closed, waiting for in-flight work to finish.
    Drain,
    /// Copying (gate open unless stop-the-world).
    Copy,
    /// Dirty-bit: new kernels are retained, in-flight work drains.
    SoftStop,
    /// Dirty-bit without retention: gate closed, draining before the stop.
    StopDrain,
    /// Dirty-bit final stop: retransmitting.
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobKind {
    Copy(BufferHandle),
    Checksum(BufferHandle),
    Stage(BufferHandle),
    Host,
    Dag,
    Meta,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    kind: JobKind,
    channel: Channel,
    sent: u64,
    precopy: bool,
    /// Part of the initial GPU pre-copy.
    gpu_phase: bool,
}

#[derive(Debug, Clone)]
enum Rec {
    Partial(Vec<u8>),
    Inline { data: Vec<u8>, precopy: bool },
    Dedup(Upstream),
}

/// Image context captured at a stop point.
#[derive(Debug, Clone)]
struct Frozen {
    allocs: Vec<AllocRecord>,
    next_handle: u32,
    next_addr: u64,
    streams: Vec<u32>,
    host: BTreeMap<u64, Vec<u8>>,
    cursor: Option<u64>,
}

#[derive(Debug)]
pub(crate) struct Session {
    action: Action,
    stage: Stage,
    gate: bool,
    offender_gate: bool,
    gate_since: SimTime,
    gate_ns: u64,
    started: SimTime,
    stop_at: SimTime,
    stall_at_start: u64,
    jobs: HashMap<JobId, Job>,
    buf_job: HashMap<BufferHandle, JobId>,
    recs: BTreeMap<BufferHandle, Rec>,
    /// Buffers the checkpoint is responsible for.
    set: BTreeSet<BufferHandle>,
    tracked: usize,
    candidates: HashMap<BufferHandle, Upstream>,
    staged: HashMap<BufferHandle, Vec<u8>>,
    staging: BTreeSet<BufferHandle>,
    staging_used: u64,
    delayed: BTreeSet<BufferHandle>,
    /// Dirty-bit: buffers to retransmit at the stop.
    dirty: BTreeSet<BufferHandle>,
    ever_dirty: BTreeSet<BufferHandle>,
    /// Dirty-bit: buffers allocated while kernels are retained.
    recompute: BTreeSet<BufferHandle>,
    frozen: Option<Frozen>,
    host_pages_at_stop: u64,
    gpu_phase_left: usize,
    report: MetricsReport,
}

impl Session {
    fn new(action: Action, now: SimTime, stall: u64) -> Self {
        Self {
            action,
            stage: Stage::Drain,
            gate: true,
            offender_gate: false,
            gate_since: now,
            gate_ns: 0,
            started: now,
            stop_at: now,
            stall_at_start: stall,
            jobs: HashMap::new(),
            buf_job: HashMap::new(),
            recs: BTreeMap::new(),
            set: BTreeSet::new(),
            tracked: 0,
            candidates: HashMap::new(),
            staged: HashMap::new(),
            staging: BTreeSet::new(),
            staging_used: 0,
            delayed: BTreeSet::new(),
            dirty: BTreeSet::new(),
            ever_dirty: BTreeSet::new(),
            recompute: BTreeSet::new(),
            frozen: None,
            host_pages_at_stop: 0,
            gpu_phase_left: 0,
            report: MetricsReport { mode: action.mode.name().into(), session_start_ns: now, ..Default::default() },
        }
    }

    pub(crate) fn gate_closed(&self) -> bool {
        self.gate || self.offender_gate
    }

    pub(crate) fn mode(&self) -> CkptMode {
        self.action.mode
    }

    fn set_gate(&mut self, closed: bool, now: SimTime) {
        let was = self.gate_closed();
        self.gate = closed;
        self.gate_changed(was, now);
    }

    fn gate_changed(&mut self, was: bool, now: SimTime) {
        let is = self.gate_closed();
        if was && !is {
            self.gate_ns += now - self.gate_since;
        } else if !was && is {
            self.gate_since = now;
        }
    }

    fn safe(&self, h: BufferHandle) -> bool {
        self.staged.contains_key(&h) || matches!(self.recs.get(&h), Some(Rec::Inline { .. } | Rec::Dedup(_)))
    }

    fn dirty_tracking(&self) -> bool {
        self.action.mode == CkptMode::DirtyBit && matches!(self.stage, Stage::Copy | Stage::SoftStop | Stage::StopDrain)
    }
}

impl Process {
    pub(crate) fn start_session(&mut self, action: Action) -> Result<()> {
        debug_assert!(self.session.is_none());
        self.session = Some(Session::new(action, self.m.now(), self.stats.stall_ns));
        Ok(())
    }

    pub(crate) fn session_validating(&self) -> bool {
        self.session.as_ref().is_some_and(|s| s.mode() != CkptMode::StopTheWorld)
    }

    fn sess(&mut self) -> &mut Session {
        self.session.as_mut().expect("active session")
    }

    fn queue_job(&mut self, kind: JobKind, bytes: u64, precopy: bool, gpu_phase: bool) -> Option<JobId> {
        if bytes == 0 {
            return None;
        }
        let s = self.session.as_ref().unwrap();
        let channel = match kind {
            JobKind::Checksum(_) => Channel::Checksum,
            JobKind::Stage(_) => Channel::Device,
            _ => s.action.channel,
        };
        let id = self.m.transfer_raw(channel, bytes, Priority::Ckpt);
        let s = self.sess();
        s.jobs.insert(id, Job { kind, channel, sent: 0, precopy, gpu_phase });
        if let JobKind::Copy(h) | JobKind::Checksum(h) = kind {
            s.buf_job.insert(h, id);
            if gpu_phase {
                s.gpu_phase_left += 1;
            }
        }
        Some(id)
    }

    fn queue_copy(&mut self, h: BufferHandle, precopy: bool, gpu_phase: bool) {
        let size = self.m.dev.get(h).map_or(0, |b| b.size);
        self.sess().recs.insert(h, Rec::Partial(vec![0; size as usize]));
        self.queue_job(JobKind::Copy(h), size, precopy, gpu_phase);
    }

    /// Checksum for dedup candidates, copy otherwise.
    fn queue_gpu(&mut self, h: BufferHandle, precopy: bool, gpu_phase: bool) {
        let b = self.m.dev.get(h).unwrap();
        let cand = b.upstream.filter(|u| self.cfg.dedup && u.len == b.size && self.m.host.hw_clean(u.host_addr, u.len));
        match cand {
            Some(u) => {
                let size = b.size;
                self.sess().candidates.insert(h, u);
                self.queue_job(JobKind::Checksum(h), size, precopy, gpu_phase);
            }
            None => self.queue_copy(h, precopy, gpu_phase),
        }
    }

    fn cancel_buf_job(&mut self, h: BufferHandle) {
        let Some(s) = self.session.as_mut() else { return };
        if let Some(id) = s.buf_job.remove(&h) {
            if let Some(job) = s.jobs.remove(&id) {
                if matches!(job.kind, JobKind::Copy(_)) {
                    s.report.bytes_retransmit += job.sent;
                }
                if job.gpu_phase {
                    s.gpu_phase_left -= 1;
                    if s.gpu_phase_left == 0 {
                        s.report.gpu_phase_dirty = s.ever_dirty.len() as u64;
                    }
                }
                self.m.cancel_job(job.channel, id);
            }
        }
    }

    fn freeze(&self) -> Frozen {
        Frozen {
            allocs: self.m.dev.allocation_table().into_iter().map(|(handle, base, size)| AllocRecord { handle, base, size }).collect(),
            next_handle: self.m.dev.next_handle(),
            next_addr: self.m.dev.next_addr(),
            streams: self.m.stream_ids().into_iter().map(|s| s.0).collect(),
            host: self.m.host.snapshot(),
            cursor: (self.next_call as u64).checked_sub(1),
        }
    }

    fn meta_bytes_estimate(&self) -> u64 {
        8 + 5 * self.m.stream_ids().len() as u64 + 21 * self.m.dev.active_handles().len() as u64
    }

    // ---- driver --------------------------------------------------------

    pub(crate) fn session_tick(&mut self) -> Result<()> {
        loop {
            let Some(s) = self.session.as_ref() else { return Ok(()) };
            let before = s.stage;
            let mode = s.mode();
            match s.stage {
                Stage::Drain if self.m.all_idle() => self.take_stop()?,
                Stage::Copy => {
                    if mode == CkptMode::DirtyBit {
                        let thr = self.cfg.dirty_threshold * s.tracked as f64;
                        let over = s.action.dirty.requeue && s.ever_dirty.len() as f64 > thr;
                        if s.action.dirty.retain && (over || s.jobs.is_empty()) {
                            self.soft_stop();
                        } else if s.jobs.is_empty() {
                            let now = self.m.now();
                            let s = self.sess();
                            s.stage = Stage::StopDrain;
                            s.set_gate(true, now);
                        }
                    } else if s.jobs.is_empty() {
                        return self.finalize();
                    }
                }
                Stage::SoftStop if s.jobs.is_empty() && self.m.only_held_remaining() => self.hard_stop(),
                Stage::StopDrain if self.m.all_idle() => self.hard_stop(),
                Stage::Stop if s.jobs.is_empty() => return self.finalize(),
                _ => {}
            }
            if self.session.as_ref().is_none_or(|s| s.stage == before) {
                return Ok(());
            }
            self.changed = true;
        }
    }

    fn take_stop(&mut self) -> Result<()> {
        let now = self.m.now();
        let mode = self.sess().mode();
        let active = self.m.dev.active_handles();
        for h in &active {
            let b = self.m.dev.get_mut(*h).unwrap();
            b.set_chunks(ChunkState::NotCopied);
            b.dirty = false;
        }
        let host_bytes = self.m.host.total_bytes();
        {
            let s = self.sess();
            s.stop_at = now;
            s.set = active.iter().copied().collect();
            s.tracked = active.len();
            s.host_pages_at_stop = host_bytes;
            s.report.tracked_buffers = active.len() as u64;
            s.report.bytes_cpu = host_bytes;
        }
        match mode {
            CkptMode::StopTheWorld => {
                let f = self.freeze();
                self.sess().report.cursor = f.cursor;
                self.sess().frozen = Some(f);
                for h in active {
                    self.queue_copy(h, false, false);
                }
                self.queue_job(JobKind::Host, host_bytes, false, false);
                let meta = self.meta_bytes_estimate();
                self.queue_job(JobKind::Meta, meta, false, false);
                self.sess().stage = Stage::Copy;
            }
            CkptMode::Cow => {
                let f = self.freeze();
                self.sess().report.cursor = f.cursor;
                self.sess().frozen = Some(f);
                self.dag.set_gc(false);
                for h in active {
                    self.queue_gpu(h, true, false);
                }
                self.queue_job(JobKind::Host, host_bytes, true, false);
                let meta = self.meta_bytes_estimate();
                self.queue_job(JobKind::Meta, meta, true, false);
                let s = self.sess();
                s.stage = Stage::Copy;
                s.set_gate(false, now);
            }
            CkptMode::DirtyBit => {
                self.m.host.clear_all_soft_dirty();
                self.dag.set_gc(false);
                let interleave = self.cfg.coordination == Coordination::Interleaved;
                let slices = if interleave { active.len().max(1) as u64 } else { 1 };
                let mut host_left = host_bytes;
                for (i, h) in active.iter().enumerate() {
                    self.queue_gpu(*h, true, true);
                    if interleave {
                        let n = host_bytes.div_ceil(slices).min(host_left);
                        host_left -= n;
                        let _ = i;
                        self.queue_job(JobKind::Host, n, true, false);
                    }
                }
                self.queue_job(JobKind::Host, host_left, true, false);
                let s = self.sess();
                if s.gpu_phase_left == 0 {
                    s.report.gpu_phase_dirty = 0;
                }
                s.stage = Stage::Copy;
                s.set_gate(false, now);
            }
        }
        Ok(())
    }

    fn soft_stop(&mut self) {
        self.dag.retained = true;
        let mut slack = BTreeSet::new();
        for meta in self.ops.values() {
            slack.extend(meta.spec.writes.iter().copied());
        }
        let dirty = &self.session.as_ref().unwrap().dirty;
        let slack_bytes: u64 = slack.iter().filter(|h| !dirty.contains(h)).filter_map(|h| self.m.dev.get(*h)).map(|b| b.size).sum();
        let s = self.sess();
        s.report.slack_bytes = slack_bytes;
        s.report.soft_stop = true;
        s.stage = Stage::SoftStop;
    }

    fn hard_stop(&mut self) {
        let now = self.m.now();
        let cursor = (self.next_call as u64).checked_sub(1);
        {
            let s = self.sess();
            s.stage = Stage::Stop;
            s.stop_at = now;
            s.report.cursor = cursor;
            s.set_gate(true, now);
        }
        let s = self.session.as_ref().unwrap();
        let mut resend: BTreeSet<BufferHandle> = s.dirty.iter().copied().collect();
        for h in &s.set {
            if !s.recs.contains_key(h) && !s.buf_job.contains_key(h) {
                resend.insert(*h);
            }
        }
        let stale: Vec<BufferHandle> = s
            .recs
            .iter()
            .filter(|(_, r)| matches!(r, Rec::Dedup(u) if !self.m.host.hw_clean(u.host_addr, u.len)))
            .map(|(h, _)| *h)
            .collect();
        let mut stop_bytes = 0;
        for h in resend.iter().chain(&stale) {
            if self.m.dev.get(*h).is_some_and(|b| b.is_active()) {
                stop_bytes += self.m.dev.get(*h).unwrap().size;
                self.queue_copy(*h, false, false);
            }
        }
        let cpu_dirty = self.m.host.soft_dirty_pages().len() as u64 * self.m.host.page_size();
        self.queue_job(JobKind::Host, cpu_dirty, false, false);
        let pending = self.dag.pending_subgraph();
        let dag_bytes = if pending.node_count() > 0 { pending.serialize().len() as u64 } else { 0 };
        self.queue_job(JobKind::Dag, dag_bytes, false, false);
        let meta = self.meta_bytes_estimate();
        self.queue_job(JobKind::Meta, meta, false, false);
        let s = self.sess();
        s.report.bytes_dirty_stop = stop_bytes;
        s.report.bytes_cpu_dirty = cpu_dirty;
    }

    fn finalize(&mut self) -> Result<()> {
        let now = self.m.now();
        let mut s = self.session.take().unwrap();
        let was = s.gate_closed();
        s.gate = false;
        s.offender_gate = false;
        s.gate_changed(was, now);
        let page_size = self.m.host.page_size() as u32;
        let mut img = CheckpointImage::new(page_size);
        let frozen = match s.frozen.take() {
            Some(f) => f,
            None => self.freeze(),
        };
        img.kind = match s.mode() {
            CkptMode::StopTheWorld => ImageKind::StopTheWorld,
            CkptMode::Cow => ImageKind::Cow,
            CkptMode::DirtyBit => ImageKind::DirtyBit,
        };
        img.next_handle = frozen.next_handle;
        img.next_addr = frozen.next_addr;
        img.streams = frozen.streams;
        img.host_pages = frozen.host;
        img.cursor = if s.mode() == CkptMode::DirtyBit { s.report.cursor } else { frozen.cursor };
        if s.mode() == CkptMode::DirtyBit {
            img.dag = self.dag.pending_subgraph();
        }
        let mode = s.mode();
        let (started, stop_at, gate_ns) = (s.started, s.stop_at, s.gate_ns);
        let r = &mut s.report;
        for a in &frozen.allocs {
            let rec = match s.recs.remove(&a.handle) {
                Some(Rec::Inline { data, precopy }) => {
                    if precopy {
                        r.bytes_precopy += a.size;
                    } else {
                        r.bytes_dirty += a.size;
                    }
                    GpuRecord::Inline(data)
                }
                Some(Rec::Dedup(u)) => {
                    r.bytes_dedup_saved += a.size;
                    GpuRecord::DedupRef { host_addr: u.host_addr, len: u.len, crc: u.crc }
                }
                _ if s.recompute.contains(&a.handle) => {
                    let writers = img
                        .dag
                        .kernels()
                        .filter(|(_, k)| k.state != KernelState::Done && k.writes.contains(&a.handle))
                        .map(|(id, _)| id.0)
                        .collect();
                    GpuRecord::Recompute(writers)
                }
                _ => {
                    return Err(ProcessError::Image(ImageError::InvariantViolation(format!(
                        "buffer {} has no checkpoint record",
                        a.handle.0
                    ))))
                }
            };
            img.gpu.insert(a.handle, rec);
        }
        img.allocs = frozen.allocs;
        let bytes = write_image(&img)?;
        let sizes = img.section_sizes();
        r.image_bytes = bytes.len() as u64;
        r.dag_bytes = sizes.dag;
        r.meta_bytes = sizes.meta;
        r.dag_nodes = img.dag.kernel_count() as u64;
        r.retained_kernels = r.dag_nodes;
        r.cursor = img.cursor;
        r.stop_ns = gate_ns;
        r.downtime_ns = match mode {
            CkptMode::StopTheWorld => now - started,
            CkptMode::Cow => gate_ns,
            CkptMode::DirtyBit => now - stop_at,
        };
        r.stall_ns = self.stats.stall_ns - s.stall_at_start;
        r.session_end_ns = now;
        if s.tracked > 0 {
            r.gpu_dirty_fraction = s.ever_dirty.len() as f64 / s.tracked as f64;
        }
        if s.host_pages_at_stop > 0 {
            r.cpu_dirty_fraction = r.bytes_cpu_dirty as f64 / s.host_pages_at_stop as f64;
        }
        r.offenders = self.offenders.iter().cloned().collect();
        self.images.push(img);
        self.reports.push(s.report);
        self.dag.retained = false;
        self.unblock(Blocker::Retain);
        self.unblock_matching(|b| matches!(b, Blocker::Cow(_)));
        self.dag.set_gc(true);
        if s.action.halt {
            self.halted = true;
        }
        self.changed = true;
        Ok(())
    }

    // ---- hooks from the interception layer -----------------------------

    /// CoW gating of a dataflow op. `Err` blocks issue.
    pub(crate) fn session_gate_op(&mut self, call: &ApiCall, spec: &AccessSpec) -> Result<std::result::Result<Vec<Blocker>, Block>> {
        let Some(s) = self.session.as_mut() else { return Ok(Ok(Vec::new())) };
        if s.mode() != CkptMode::Cow || s.stage != Stage::Copy {
            return Ok(Ok(Vec::new()));
        }
        if call.kind.is_launch() && call.kernel_name.as_ref().is_some_and(|n| self.offenders.contains(n)) {
            let now = self.m.now();
            let was = s.gate_closed();
            s.offender_gate = true;
            s.report.stw_fallbacks += 1;
            s.gate_changed(was, now);
            return Ok(Err(Block::Gate));
        }
        let mut blockers = Vec::new();
        let mut delayed = false;
        for h in spec.writes.iter().copied() {
            let s = self.session.as_ref().unwrap();
            if !s.set.contains(&h) || s.safe(h) {
                continue;
            }
            blockers.push(Blocker::Cow(h));
            delayed |= !self.stage_or_delay(h);
        }
        if delayed {
            self.sess().report.delayed_kernels += 1;
        }
        Ok(Ok(blockers))
    }

    /// Starts staging `h` unless a delay is cheaper or staging is full.
    /// Returns true when `h` is being staged.
    fn stage_or_delay(&mut self, h: BufferHandle) -> bool {
        let s = self.session.as_ref().unwrap();
        if s.staging.contains(&h) {
            return true;
        }
        let size = self.m.dev.get(h).map_or(0, |b| b.size);
        let remaining = s
            .buf_job
            .get(&h)
            .and_then(|id| s.jobs.get(id).map(|j| (j.channel, *id)))
            .and_then(|(ch, id)| self.m.bytes_until_done(ch, id).map(|b| self.m.estimate_ns(ch, b)));
        if remaining.is_some_and(|ns| ns <= self.cfg.delay_threshold_ns) {
            return false;
        }
        if s.staging_used + size > self.cfg.staging_capacity() {
            return false;
        }
        let s = self.sess();
        s.staging.insert(h);
        s.staging_used += size;
        s.report.cow_copies += 1;
        s.report.staged_bytes += size;
        self.queue_job(JobKind::Stage(h), size, false, false);
        true
    }

    pub(crate) fn session_gate_free(&mut self, h: BufferHandle) -> Result<Option<Block>> {
        let Some(s) = self.session.as_ref() else { return Ok(None) };
        if s.mode() != CkptMode::Cow || s.stage != Stage::Copy || !s.set.contains(&h) || s.safe(h) {
            return Ok(None);
        }
        if !self.stage_or_delay(h) {
            self.sess().delayed.insert(h);
        }
        Ok(Some(Block::CowFree(h)))
    }

    pub(crate) fn session_on_malloc(&mut self, h: BufferHandle) {
        let Some(s) = self.session.as_mut() else { return };
        if s.mode() != CkptMode::DirtyBit {
            return;
        }
        match s.stage {
            Stage::Copy | Stage::StopDrain => {
                s.set.insert(h);
                self.record_dirty(h);
            }
            Stage::SoftStop => {
                s.recompute.insert(h);
            }
            _ => {}
        }
    }

    pub(crate) fn session_on_free(&mut self, h: BufferHandle) {
        let Some(s) = self.session.as_ref() else { return };
        if s.mode() != CkptMode::DirtyBit {
            return;
        }
        self.cancel_buf_job(h);
        let s = self.sess();
        s.set.remove(&h);
        s.dirty.remove(&h);
        s.recs.remove(&h);
    }

    fn record_dirty(&mut self, h: BufferHandle) {
        let Some(s) = self.session.as_ref() else { return };
        if !s.dirty_tracking() || !s.set.contains(&h) {
            return;
        }
        let requeue = s.action.dirty.requeue && s.stage == Stage::Copy;
        if !requeue && s.dirty.contains(&h) {
            return;
        }
        // Nothing captured yet: the pending job will read the new contents.
        let untouched = s.buf_job.get(&h).and_then(|id| s.jobs.get(id)).is_some_and(|j| j.sent == 0);
        if untouched && !s.staged.contains_key(&h) {
            return;
        }
        self.cancel_buf_job(h);
        if let Some(b) = self.m.dev.get_mut(h) {
            b.set_chunks(ChunkState::NotCopied);
            b.dirty = true;
        }
        let s = self.sess();
        s.ever_dirty.insert(h);
        s.recs.remove(&h);
        s.candidates.remove(&h);
        if requeue {
            // A speculated write may not have changed a host-backed buffer;
            // the checksum decides.
            self.queue_gpu(h, true, false);
        } else {
            self.sess().dirty.insert(h);
        }
    }

    pub(crate) fn session_pre_clear(&mut self, scope: Scope) {
        if !self.session.as_ref().is_some_and(Session::dirty_tracking) {
            return;
        }
        let writes: BTreeSet<BufferHandle> = self
            .dag
            .kernels()
            .filter(|(_, k)| k.state == KernelState::Done)
            .filter(|(_, k)| match scope {
                Scope::Device => true,
                Scope::Stream(s) => k.stream == s,
            })
            .flat_map(|(_, k)| k.writes.iter().copied())
            .collect();
        for h in writes {
            self.record_dirty_if_new(h);
        }
    }

    /// Re-recording a write already seen since its last copy is a no-op.
    fn record_dirty_if_new(&mut self, h: BufferHandle) {
        let Some(s) = self.session.as_ref() else { return };
        let pending = s.dirty.contains(&h) || matches!(s.recs.get(&h), Some(Rec::Partial(_)));
        if !pending && !self.m.dev.get(h).is_some_and(|b| b.dirty) {
            self.record_dirty(h);
        }
    }

    pub(crate) fn session_on_done(&mut self, _op: OpId, meta: &OpMeta, missed: &BTreeSet<BufferHandle>) -> Result<()> {
        let Some(s) = self.session.as_mut() else { return Ok(()) };
        if !missed.is_empty() {
            s.report.validation_failures += 1;
        }
        match s.mode() {
            CkptMode::DirtyBit if s.dirty_tracking() => {
                for h in meta.spec.writes.iter().chain(missed) {
                    self.record_dirty(*h);
                }
            }
            CkptMode::Cow if s.stage == Stage::Copy && missed.iter().any(|h| s.set.contains(h) && !s.safe(*h)) => {
                self.restart_cow(meta.call.kernel_name.clone().unwrap_or_default());
            }
            _ => {}
        }
        Ok(())
    }

    /// Aborts a CoW session whose snapshot was clobbered by a missed write
    /// and restarts it from a fresh stop.
    fn restart_cow(&mut self, offender: String) {
        let now = self.m.now();
        let s = self.session.as_mut().unwrap();
        let jobs: Vec<(JobId, Channel)> = s.jobs.iter().map(|(id, j)| (*id, j.channel)).collect();
        for (id, ch) in jobs {
            self.m.cancel_job(ch, id);
        }
        let s = self.session.as_mut().unwrap();
        s.jobs.clear();
        s.buf_job.clear();
        s.recs.clear();
        s.staged.clear();
        s.staging.clear();
        s.staging_used = 0;
        s.candidates.clear();
        s.frozen = None;
        s.stage = Stage::Drain;
        s.report.restarts += 1;
        s.set_gate(true, now);
        self.offenders.insert(offender);
        self.unblock_matching(|b| matches!(b, Blocker::Cow(_)));
        self.dag.set_gc(true);
    }

    /// Returns true when the chunk belonged to this session.
    pub(crate) fn session_on_chunk(&mut self, _channel: Channel, done: ChunkDone) -> Result<bool> {
        let Some(s) = self.session.as_mut() else { return Ok(false) };
        let Some(job) = s.jobs.get_mut(&done.job) else { return Ok(false) };
        if done.cancelled {
            return Ok(true);
        }
        job.sent += done.len;
        let job = *job;
        match job.kind {
            JobKind::Copy(h) => {
                let chunk = self.m.dev.chunk_size();
                let src = match s.staged.get(&h) {
                    Some(st) => &st[..],
                    None => self.m.dev.get(h).expect("copied buffer exists").bytes(),
                };
                let (a, b) = (done.offset as usize, (done.offset + done.len) as usize);
                if let Some(Rec::Partial(buf)) = s.recs.get_mut(&h) {
                    buf[a..b].copy_from_slice(&src[a..b]);
                }
                if let Some(buf) = self.m.dev.get_mut(h) {
                    if let Some(c) = buf.chunks.get_mut((done.offset / chunk) as usize) {
                        *c = ChunkState::Copied;
                    }
                }
                if done.complete {
                    let s = self.sess();
                    if let Some(Rec::Partial(data)) = s.recs.remove(&h) {
                        s.recs.insert(h, Rec::Inline { data, precopy: job.precopy });
                    }
                    self.buffer_settled(h);
                }
            }
            JobKind::Checksum(h) => {
                if done.complete {
                    let u = s.candidates[&h];
                    let crc = match s.staged.get(&h) {
                        Some(st) => crate::image::crc32(st),
                        None => crate::image::crc32(self.m.dev.get(h).expect("checksummed buffer exists").bytes()),
                    };
                    if crc == u.crc {
                        s.recs.insert(h, Rec::Dedup(u));
                        self.buffer_settled(h);
                    } else {
                        s.candidates.remove(&h);
                        self.sess().buf_job.remove(&h);
                        self.queue_copy(h, job.precopy, job.gpu_phase);
                    }
                }
            }
            JobKind::Stage(h) => {
                if done.complete {
                    let data = self.m.dev.get(h).expect("staged buffer exists").bytes().to_vec();
                    s.staging.remove(&h);
                    s.staged.insert(h, data);
                    self.unblock(Blocker::Cow(h));
                }
            }
            JobKind::Host | JobKind::Dag | JobKind::Meta => {}
        }
        if done.complete {
            if let Some(s) = self.session.as_mut() {
                if let Some(j) = s.jobs.remove(&done.job) {
                    if j.gpu_phase && matches!(j.kind, JobKind::Copy(_) | JobKind::Checksum(_)) {
                        s.gpu_phase_left -= 1;
                        if s.gpu_phase_left == 0 {
                            s.report.gpu_phase_dirty = s.ever_dirty.len() as u64;
                        }
                    }
                }
            }
            self.changed = true;
        }
        Ok(true)
    }

    /// A buffer's record is final: release staging and waiting kernels.
    fn buffer_settled(&mut self, h: BufferHandle) {
        let s = self.sess();
        s.buf_job.remove(&h);
        if s.staged.remove(&h).is_some() {
            let size = self.m.dev.get(h).map_or(0, |b| b.size);
            let s = self.sess();
            s.staging_used = s.staging_used.saturating_sub(size);
        }
        self.unblock(Blocker::Cow(h));
    }
}
