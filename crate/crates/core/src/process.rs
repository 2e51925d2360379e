//! A simulated application process: the API interception layer driving the
//! machine, with hooks into the checkpoint and restore protocols.
//!
//! The application is one CPU thread walking a trace. Each call is either
//! issued at once, blocks before issue (full stream queue, closed gate,
//! implicit drain) or is issued and then waited on (synchronous copies and
//! synchronizations).

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::api::{rule_for, ApiCall, ApiKind, ClearScope, DagRule};
use crate::config::Config;
use crate::cr::{Action, MetricsReport, RestoreCtx, RestoreStats, Session};
use crate::dag::{DagError, KernelDag, NodeId, Scope};
use crate::image::{crc32, CheckpointImage, ImageError};
use crate::sim::effects::h2d_payload;
use crate::sim::{
    BufferHandle, Channel, ChunkDone, Device, HostMemory, Machine, Notice, OpId, SimError, SimTime, StreamId, Upstream, Work,
};
use crate::speculation::{infer_access, validate, AccessSpec, Confidence, Phase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("trace call {seq}: {reason}")]
    BadCall { seq: u64, reason: String },
    #[error("no progress possible at t={at} ns with call {next} pending")]
    Deadlock { at: SimTime, next: usize },
}

pub type Result<T> = std::result::Result<T, ProcessError>;

/// Why an op is held back from its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Blocker {
    /// Waiting for a buffer's snapshot to be safe (copied or staged).
    Cow(BufferHandle),
    /// Waiting for a buffer to be loaded from the image.
    Load(BufferHandle),
    /// Recorded in the DAG but not launched.
    Retain,
    /// Frozen while a failed restore is repaired.
    Repair,
    /// A replayed DAG predecessor has not finished.
    Pred(NodeId),
    /// Full restore: nothing runs until every buffer is loaded.
    FullLoad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpOrigin {
    App,
    /// Re-launched from a checkpointed DAG.
    Replay,
    /// Re-executed by a restore repair.
    Hidden,
}

#[derive(Debug, Clone)]
pub struct OpMeta {
    pub call: Arc<ApiCall>,
    pub node: Option<NodeId>,
    pub spec: AccessSpec,
    pub stream: StreamId,
    pub work: Work,
    pub validated: bool,
    pub origin: OpOrigin,
    pub started_at: Option<SimTime>,
    /// Host source and payload CRC of a host-to-device copy.
    pub h2d_src: Option<(u64, u32)>,
}

/// A post-issue wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Wait {
    Op(OpId),
    AllIdle,
    Stream(StreamId),
    Destroy(StreamId),
    Until(SimTime),
}

/// A pre-issue block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Block {
    Gate,
    Slot(StreamId),
    Drain,
    /// Free of a buffer the checkpoint still needs.
    CowFree(BufferHandle),
    /// Free while kernels are retained or a restore is in progress.
    FreeDeferred,
    Trigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    /// Before issuing the call with this seq.
    At(u64),
    /// After every k-th DeviceSynchronize.
    EverySyncs(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct RunStats {
    pub stall_ns: u64,
    pub stop_ns: u64,
    pub end_ns: SimTime,
    pub kernels: u64,
    pub validated_kernels: u64,
    pub validation_failures: u64,
    pub syncs: u64,
}

/// Device and host contents, for bit-level comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSnapshot {
    pub buffers: Vec<(BufferHandle, u64, Vec<u8>)>,
    pub host: std::collections::BTreeMap<u64, Vec<u8>>,
}

impl StateSnapshot {
    pub fn of(m: &Machine) -> Self {
        Self::capture(&m.dev, &m.host)
    }

    pub fn capture(dev: &Device, host: &HostMemory) -> Self {
        Self { buffers: dev.iter_active().map(|b| (b.handle, b.base, b.bytes().to_vec())).collect(), host: host.snapshot() }
    }

    /// First difference, for failure messages.
    pub fn diff(&self, other: &Self) -> Option<String> {
        if self.buffers.len() != other.buffers.len() {
            return Some(format!("{} vs {} buffers", self.buffers.len(), other.buffers.len()));
        }
        for (a, b) in self.buffers.iter().zip(&other.buffers) {
            if a != b {
                return Some(format!("buffer {} differs", a.0 .0));
            }
        }
        if self.host.keys().ne(other.host.keys()) {
            return Some("host page sets differ".into());
        }
        self.host.iter().find(|(k, v)| other.host[*k] != **v).map(|(k, _)| format!("host page {k} differs"))
    }
}

pub struct Process {
    pub(crate) cfg: Config,
    pub(crate) m: Machine,
    pub(crate) dag: KernelDag,
    pub(crate) trace: Arc<[Arc<ApiCall>]>,
    pub(crate) next_call: usize,
    pub(crate) wait: Option<Wait>,
    pub(crate) block: Option<Block>,
    pub(crate) ops: HashMap<OpId, OpMeta>,
    pub(crate) node_op: HashMap<NodeId, OpId>,
    holds: HashMap<OpId, BTreeSet<Blocker>>,
    waiting: HashMap<Blocker, Vec<OpId>>,
    triggers: Vec<(Trigger, Action)>,
    pending_action: Option<Action>,
    pub(crate) session: Option<Session>,
    pub(crate) restore: Option<RestoreCtx>,
    /// Kernel names whose speculation failed during a CoW checkpoint.
    pub(crate) offenders: BTreeSet<String>,
    pub(crate) halted: bool,
    pub images: Vec<CheckpointImage>,
    pub reports: Vec<MetricsReport>,
    pub stats: RunStats,
    /// Run every speculated kernel instrumented, session or not.
    pub validate_always: bool,
    pub(crate) finished_restore: Option<RestoreStats>,
    pub(crate) changed: bool,
    next_token: u64,
}

impl Process {
    pub fn new(cfg: Config, trace: impl Into<Arc<[Arc<ApiCall>]>>) -> Self {
        let m = Machine::new(&cfg);
        Self::with_machine(cfg, m, trace.into())
    }

    pub(crate) fn with_machine(cfg: Config, m: Machine, trace: Arc<[Arc<ApiCall>]>) -> Self {
        Self {
            cfg,
            m,
            dag: KernelDag::new(),
            trace,
            next_call: 0,
            wait: None,
            block: None,
            ops: HashMap::new(),
            node_op: HashMap::new(),
            holds: HashMap::new(),
            waiting: HashMap::new(),
            triggers: Vec::new(),
            pending_action: None,
            session: None,
            restore: None,
            offenders: BTreeSet::new(),
            halted: false,
            images: Vec::new(),
            reports: Vec::new(),
            stats: RunStats::default(),
            validate_always: false,
            finished_restore: None,
            changed: false,
            next_token: 0,
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn machine(&self) -> &Machine {
        &self.m
    }

    pub fn dag(&self) -> &KernelDag {
        &self.dag
    }

    pub fn next_call(&self) -> usize {
        self.next_call
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn state(&self) -> StateSnapshot {
        StateSnapshot::of(&self.m)
    }

    pub fn add_trigger(&mut self, trigger: Trigger, action: Action) {
        self.triggers.push((trigger, action));
    }

    // ---- blockers ------------------------------------------------------

    pub(crate) fn hold(&mut self, op: OpId, b: Blocker) {
        if self.m.is_started(op) {
            return;
        }
        if self.holds.entry(op).or_default().insert(b) {
            self.waiting.entry(b).or_default().push(op);
            self.m.set_held(op, true);
        }
    }

    pub(crate) fn unblock(&mut self, b: Blocker) {
        let Some(ops) = self.waiting.remove(&b) else { return };
        self.changed = true;
        for op in ops {
            if let Some(set) = self.holds.get_mut(&op) {
                set.remove(&b);
                if set.is_empty() {
                    self.holds.remove(&op);
                    self.m.set_held(op, false);
                }
            }
        }
    }

    pub(crate) fn unblock_matching(&mut self, f: impl Fn(&Blocker) -> bool) {
        let keys: Vec<Blocker> = self.waiting.keys().filter(|b| f(b)).copied().collect();
        for b in keys {
            self.unblock(b);
        }
    }

    pub(crate) fn token(&mut self) -> u64 {
        self.next_token += 1;
        self.next_token
    }

    // ---- main loop -----------------------------------------------------

    pub fn app_finished(&self) -> bool {
        self.next_call >= self.trace.len() && self.wait.is_none()
    }

    fn finished(&self) -> bool {
        self.halted
            || (self.app_finished()
                && self.session.is_none()
                && self.restore.is_none()
                && self.pending_action.is_none()
                && self.ops.is_empty()
                && self.m.is_quiescent())
    }

    /// Runs until the trace is exhausted and all work has drained, or the
    /// process halts for migration.
    pub fn run(&mut self) -> Result<RunStats> {
        loop {
            self.changed = false;
            self.advance_app()?;
            self.tick()?;
            if self.finished() {
                break;
            }
            let t0 = self.m.now();
            let (stalled, stopped) = (self.cr_blocked(), self.gate_closed());
            let stepped = self.m.step()?;
            let dt = self.m.now() - t0;
            if stalled {
                self.stats.stall_ns += dt;
            }
            if stopped {
                self.stats.stop_ns += dt;
            }
            let notices = self.m.take_notices();
            if !notices.is_empty() {
                self.changed = true;
            }
            for n in notices {
                self.on_notice(n)?;
            }
            if !stepped && !self.changed {
                self.advance_app()?;
                self.tick()?;
                if !self.changed && !self.finished() && self.m.is_quiescent() {
                    return Err(ProcessError::Deadlock { at: self.m.now(), next: self.next_call });
                }
            }
        }
        self.stats.end_ns = self.m.now();
        Ok(self.stats)
    }

    fn tick(&mut self) -> Result<()> {
        self.session_tick()?;
        self.restore_tick()?;
        Ok(())
    }

    pub(crate) fn gate_closed(&self) -> bool {
        self.session.as_ref().is_some_and(Session::gate_closed) || self.restore.as_ref().is_some_and(RestoreCtx::gate_closed)
    }

    /// True when the application is blocked for checkpoint or restore reasons.
    fn cr_blocked(&self) -> bool {
        if self.app_finished() || self.halted {
            return false;
        }
        if self.gate_closed() {
            return true;
        }
        let stream_held = |s: StreamId| self.m.stream_has_held(s);
        if let Some(w) = self.wait {
            return match w {
                Wait::Op(o) => self.ops.get(&o).is_some_and(|m| stream_held(m.stream)),
                Wait::AllIdle => self.m.any_held(),
                Wait::Stream(s) | Wait::Destroy(s) => stream_held(s),
                Wait::Until(_) => false,
            };
        }
        match self.block {
            Some(Block::Gate | Block::CowFree(_) | Block::FreeDeferred | Block::Trigger) => true,
            Some(Block::Slot(s)) => stream_held(s),
            Some(Block::Drain) => self.m.any_held(),
            None => false,
        }
    }

    fn wait_satisfied(&self, w: Wait) -> bool {
        match w {
            Wait::Op(o) => !self.ops.contains_key(&o),
            Wait::AllIdle => self.m.all_idle(),
            Wait::Stream(s) | Wait::Destroy(s) => self.m.stream_idle(s),
            Wait::Until(t) => self.m.now() >= t,
        }
    }

    fn finish_wait(&mut self, w: Wait) -> Result<()> {
        match w {
            Wait::AllIdle => {
                self.clear_dag(Scope::Device)?;
                self.stats.syncs += 1;
                for (t, a) in &self.triggers {
                    if let Trigger::EverySyncs(k) = t {
                        if *k > 0 && self.stats.syncs.is_multiple_of(*k) && self.pending_action.is_none() {
                            self.pending_action = Some(*a);
                        }
                    }
                }
            }
            Wait::Stream(s) => self.clear_dag(Scope::Stream(s.0))?,
            Wait::Destroy(s) => {
                self.clear_dag(Scope::Stream(s.0))?;
                self.m.destroy_stream(s)?;
            }
            Wait::Op(_) | Wait::Until(_) => {}
        }
        Ok(())
    }

    fn clear_dag(&mut self, scope: Scope) -> Result<()> {
        self.session_pre_clear(scope);
        self.dag.clear(scope)?;
        Ok(())
    }

    fn advance_app(&mut self) -> Result<()> {
        loop {
            self.block = None;
            if self.halted {
                return Ok(());
            }
            if let Some(w) = self.wait {
                if !self.wait_satisfied(w) {
                    return Ok(());
                }
                self.wait = None;
                self.changed = true;
                self.finish_wait(w)?;
            }
            for (t, a) in &self.triggers {
                if *t == Trigger::At(self.next_call as u64) && self.pending_action.is_none() {
                    self.pending_action = Some(*a);
                }
            }
            if let Some(a) = self.pending_action {
                if self.session.is_some() || self.restore.is_some() {
                    self.block = Some(Block::Trigger);
                    return Ok(());
                }
                self.pending_action = None;
                self.triggers.retain(|(t, _)| *t != Trigger::At(self.next_call as u64));
                self.start_session(a)?;
                self.changed = true;
            }
            if self.next_call >= self.trace.len() {
                return Ok(());
            }
            if self.gate_closed() {
                self.block = Some(Block::Gate);
                return Ok(());
            }
            let call = self.trace[self.next_call].clone();
            if let Some(b) = self.issue(&call)? {
                self.block = Some(b);
                return Ok(());
            }
            self.next_call += 1;
            self.changed = true;
            if self.cfg.api_issue_ns > 0 && self.wait.is_none() {
                let t = self.m.now() + self.cfg.api_issue_ns;
                let tok = self.token();
                self.m.timer(t, tok)?;
                self.wait = Some(Wait::Until(t));
            }
        }
    }

    fn bad(call: &ApiCall, reason: impl Into<String>) -> ProcessError {
        ProcessError::BadCall { seq: call.seq, reason: reason.into() }
    }

    /// Issues one call, or reports why it cannot be issued yet.
    fn issue(&mut self, call: &Arc<ApiCall>) -> Result<Option<Block>> {
        match rule_for(call.kind) {
            DagRule::Skip => match call.kind {
                ApiKind::StreamCreate => {
                    self.m.create_stream(StreamId(call.stream_id()));
                    Ok(None)
                }
                ApiKind::StreamDestroy => {
                    let s = StreamId(call.stream_id());
                    if !self.m.has_stream(s) || s.0 == 0 {
                        return Err(Self::bad(call, "destroying an unknown stream"));
                    }
                    self.wait = Some(Wait::Destroy(s));
                    Ok(None)
                }
                _ => Ok(None),
            },
            DagRule::Register => match call.kind {
                ApiKind::Malloc => {
                    let h = self.m.dev.alloc(call.bytes)?;
                    self.session_on_malloc(h);
                    self.restore_on_malloc(h);
                    Ok(None)
                }
                _ => self.issue_free(call),
            },
            DagRule::ClearDag(ClearScope::Device) => {
                self.wait = Some(Wait::AllIdle);
                Ok(None)
            }
            DagRule::ClearDag(ClearScope::Stream) => {
                let s = StreamId(call.stream_id());
                if !self.m.has_stream(s) {
                    return Err(Self::bad(call, "synchronizing an unknown stream"));
                }
                self.wait = Some(Wait::Stream(s));
                Ok(None)
            }
            DagRule::AddNode(_) => self.issue_op(call),
        }
    }

    fn issue_free(&mut self, call: &ApiCall) -> Result<Option<Block>> {
        let Some(h) = call.args.first().and_then(|a| self.m.dev.lookup(a.v)) else {
            return Err(Self::bad(call, "free of an unknown address"));
        };
        if self.restore.is_some() || self.dag.retained {
            return Ok(Some(Block::FreeDeferred));
        }
        if !self.m.all_idle() {
            return Ok(Some(Block::Drain));
        }
        if let Some(b) = self.session_gate_free(h)? {
            return Ok(Some(b));
        }
        self.session_on_free(h);
        self.m.dev.free(h)?;
        Ok(None)
    }

    pub(crate) fn build_work(&self, call: &Arc<ApiCall>) -> Result<(Work, Option<(u64, u32)>)> {
        let dev = &self.m.dev;
        let resolve = |addr: u64| -> Result<(BufferHandle, u64)> {
            let h = dev.lookup(addr).ok_or_else(|| Self::bad(call, format!("no buffer at {addr:#x}")))?;
            Ok((h, addr - dev.get(h).unwrap().base))
        };
        Ok(match call.kind {
            ApiKind::LaunchKnown | ApiKind::LaunchOpaque => (Work::Kernel { call: call.clone(), duration_ns: call.duration_ns }, None),
            ApiKind::MemcpyH2D => {
                let (dst, src, n) = call.copy_args().ok_or_else(|| Self::bad(call, "memcpy needs 3 args"))?;
                let (h, off) = resolve(dst)?;
                let data: Arc<[u8]> = h2d_payload(call.seq, n).into();
                let crc = crc32(&data);
                (Work::H2D { dst: h, offset: off, data }, Some((src, crc)))
            }
            ApiKind::MemcpyD2H => {
                let (dst, src, n) = call.copy_args().ok_or_else(|| Self::bad(call, "memcpy needs 3 args"))?;
                let (h, off) = resolve(src)?;
                (Work::D2H { src: h, offset: off, len: n, host_addr: dst }, None)
            }
            ApiKind::MemcpyD2D => {
                let (dst, src, n) = call.copy_args().ok_or_else(|| Self::bad(call, "memcpy needs 3 args"))?;
                let (s, so) = resolve(src)?;
                let (d, dof) = resolve(dst)?;
                (Work::D2D { src: s, src_offset: so, dst: d, dst_offset: dof, len: n }, None)
            }
            _ => unreachable!("not a dataflow call"),
        })
    }

    pub(crate) fn kernel_duration(&self, call: &ApiCall, validated: bool) -> u64 {
        if validated {
            (call.duration_ns as f64 * self.cfg.instrumentation_factor).round() as u64
        } else {
            call.duration_ns
        }
    }

    fn issue_op(&mut self, call: &Arc<ApiCall>) -> Result<Option<Block>> {
        let stream = StreamId(call.stream_id());
        if !self.m.has_stream(stream) {
            return Err(Self::bad(call, format!("unknown stream {}", stream.0)));
        }
        if self.m.stream_len(stream) >= self.cfg.stream_queue_depth {
            return Ok(Some(Block::Slot(stream)));
        }
        let spec = infer_access(call, &self.m.dev);
        let mut blockers = match self.session_gate_op(call, &spec)? {
            Ok(b) => b,
            Err(block) => return Ok(Some(block)),
        };
        let (mut work, h2d_src) = self.build_work(call)?;
        if let (ApiKind::MemcpyH2D, Work::H2D { data, .. }) = (call.kind, &work) {
            let (src, _) = h2d_src.unwrap();
            self.m.host.write(src, data);
        }
        let node = self.dag.add_kernel(call.clone(), &spec.reads, &spec.writes, &self.m.dev)?;
        let validated =
            spec.confidence == Confidence::Speculated && (self.validate_always || self.session_validating() || self.restore.is_some());
        if let Work::Kernel { duration_ns, .. } = &mut work {
            *duration_ns = self.kernel_duration(call, validated);
        }
        if self.dag.retained {
            blockers.push(Blocker::Retain);
        }
        blockers.extend(self.restore_blockers(node, &spec));
        let op = self.m.submit(stream, work.clone(), !blockers.is_empty())?;
        for b in blockers {
            self.hold(op, b);
        }
        self.node_op.insert(node, op);
        self.ops.insert(
            op,
            OpMeta {
                call: call.clone(),
                node: Some(node),
                spec,
                stream,
                work,
                validated,
                origin: OpOrigin::App,
                started_at: None,
                h2d_src,
            },
        );
        if call.kind == ApiKind::MemcpyD2H {
            self.wait = Some(Wait::Op(op));
        }
        Ok(None)
    }

    /// Submits an op outside the application's call stream.
    pub(crate) fn submit_meta(&mut self, meta: OpMeta, blockers: Vec<Blocker>) -> Result<OpId> {
        let op = self.m.submit(meta.stream, meta.work.clone(), !blockers.is_empty())?;
        for b in blockers {
            self.hold(op, b);
        }
        if let Some(n) = meta.node {
            self.node_op.insert(n, op);
        }
        self.ops.insert(op, meta);
        Ok(op)
    }

    // ---- notices -------------------------------------------------------

    fn on_notice(&mut self, n: Notice) -> Result<()> {
        match n {
            Notice::OpStarted { op, at } => {
                let Some(meta) = self.ops.get_mut(&op) else { return Ok(()) };
                meta.started_at = Some(at);
                if let Some(node) = meta.node {
                    self.dag.mark_running(node)?;
                }
                self.restore_on_started(op, at);
            }
            Notice::OpDone { op, .. } => self.on_op_done(op)?,
            Notice::Chunk { channel, done } => self.on_chunk(channel, done)?,
            Notice::Timer(_) => {}
        }
        Ok(())
    }

    fn on_chunk(&mut self, channel: Channel, done: ChunkDone) -> Result<()> {
        if self.session_on_chunk(channel, done)? {
            return Ok(());
        }
        self.restore_on_chunk(channel, done)?;
        Ok(())
    }

    fn on_op_done(&mut self, op: OpId) -> Result<()> {
        let meta = self.ops.remove(&op).expect("completed op is tracked");
        if let Some(node) = meta.node {
            self.node_op.remove(&node);
            self.dag.on_kernel_complete(node)?;
            self.unblock(Blocker::Pred(node));
        }
        if let Work::Kernel { .. } = meta.work {
            if meta.origin != OpOrigin::Hidden {
                self.stats.kernels += 1;
            }
        }
        if let (Work::H2D { dst, offset, data }, Some((src, crc))) = (&meta.work, meta.h2d_src) {
            self.note_h2d(*dst, *offset, data.len() as u64, src, crc);
        }
        let mut missed = BTreeSet::new();
        if meta.validated {
            self.stats.validated_kernels += 1;
            let phase = if self.restore.is_some() { Phase::Restore } else { Phase::Checkpoint };
            let report = validate(meta.node.map_or(0, |n| n.0), &meta.call, &meta.spec, phase);
            if !report.ok {
                self.stats.validation_failures += 1;
                missed = report.missed;
            }
        }
        self.session_on_done(op, &meta, &missed)?;
        self.restore_on_done(op, &meta, &missed)?;
        Ok(())
    }

    /// Records host provenance after a host-to-device copy lands.
    fn note_h2d(&mut self, dst: BufferHandle, offset: u64, len: u64, src: u64, crc: u32) {
        let Ok(size) = self.m.dev.active(dst).map(|b| b.size) else { return };
        let whole = offset == 0 && len == size;
        if whole && crc32(&self.m.host.read(src, len)) == crc {
            self.m.host.clear_hw_dirty(src, len);
            let end = src + len;
            for b in self.m.dev.iter_active_mut() {
                if b.handle != dst && b.upstream.is_some_and(|u| u.host_addr < end && src < u.host_addr + u.len) {
                    b.upstream = None;
                }
            }
            self.m.dev.get_mut(dst).unwrap().upstream = Some(Upstream { host_addr: src, len, crc });
        } else if let Some(b) = self.m.dev.get_mut(dst) {
            b.upstream = None;
        }
    }
}
