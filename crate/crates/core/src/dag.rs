//! Runtime kernel DAG.
//!
//! Kernels and buffers are nodes. A kernel has `Read` edges from the
//! buffers it reads and `Write` edges to the buffers it writes. Kernel to
//! kernel edges are `Fifo` (same stream) and `Data` (read-after-write,
//! write-after-read, write-after-write). A kernel that reads and writes the
//! same buffer makes a two-node loop through the buffer node, so acyclicity
//! is a property of the kernel to kernel edges only.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::api::{ApiCall, ApiKind, Arg};
use crate::sim::{BufferHandle, Device};
use crate::wire::{Reader, WireError, WireResult, Writer};

pub const DAG_MAGIC: &[u8; 4] = b"KDAG";
pub const DAG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelState {
    Pending,
    Running,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Read,
    Write,
    Fifo,
    Data,
}

impl EdgeKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [EdgeKind::Read, EdgeKind::Write, EdgeKind::Fifo, EdgeKind::Data].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelNode {
    pub call: Arc<ApiCall>,
    pub stream: u32,
    pub reads: Vec<BufferHandle>,
    pub writes: Vec<BufferHandle>,
    pub state: KernelState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Kernel(KernelNode),
    Buffer(BufferHandle),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DagError {
    #[error("buffer {0:?} is not Active")]
    FreedBuffer(BufferHandle),
    #[error("node {0:?} is not in the expected state")]
    BadState(NodeId),
    #[error("{0} kernels in scope are not Done")]
    PendingKernels(usize),
    #[error("corrupt DAG at byte {offset}: {reason}")]
    CorruptDag { offset: usize, reason: String },
}

impl From<WireError> for DagError {
    fn from(e: WireError) -> Self {
        DagError::CorruptDag { offset: e.offset, reason: e.reason }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Device,
    Stream(u32),
}

#[derive(Debug, Clone, Default)]
pub struct KernelDag {
    nodes: BTreeMap<NodeId, Node>,
    out: BTreeMap<NodeId, BTreeSet<(NodeId, EdgeKind)>>,
    inc: BTreeMap<NodeId, BTreeSet<(NodeId, EdgeKind)>>,
    buffer_nodes: HashMap<BufferHandle, NodeId>,
    stream_tails: HashMap<u32, NodeId>,
    last_writer: HashMap<BufferHandle, NodeId>,
    readers: HashMap<BufferHandle, Vec<NodeId>>,
    next_id: u64,
    /// Record new kernels without launching them.
    pub retained: bool,
    /// Garbage-collect Done kernels as soon as nothing pending depends on them.
    gc: bool,
}

impl PartialEq for KernelDag {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.out == other.out
    }
}

impl KernelDag {
    pub fn new() -> Self {
        Self { gc: true, ..Default::default() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn kernel_count(&self) -> usize {
        self.nodes.values().filter(|n| matches!(n, Node::Kernel(_))).count()
    }

    pub fn edge_count(&self) -> usize {
        self.out.values().map(BTreeSet::len).sum()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn kernel(&self, id: NodeId) -> Option<&KernelNode> {
        match self.nodes.get(&id) {
            Some(Node::Kernel(k)) => Some(k),
            _ => None,
        }
    }

    pub fn kernels(&self) -> impl Iterator<Item = (NodeId, &KernelNode)> {
        self.nodes.iter().filter_map(|(id, n)| match n {
            Node::Kernel(k) => Some((*id, k)),
            Node::Buffer(_) => None,
        })
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, EdgeKind)> + '_ {
        self.out.iter().flat_map(|(s, set)| set.iter().map(move |(d, k)| (*s, *d, *k)))
    }

    /// Kernel predecessors of a kernel (Fifo and Data edges).
    pub fn kernel_preds(&self, id: NodeId) -> Vec<NodeId> {
        self.inc.get(&id).into_iter().flatten().filter(|(_, k)| matches!(k, EdgeKind::Fifo | EdgeKind::Data)).map(|(n, _)| *n).collect()
    }

    pub fn kernel_succs(&self, id: NodeId) -> Vec<NodeId> {
        self.out.get(&id).into_iter().flatten().filter(|(_, k)| matches!(k, EdgeKind::Fifo | EdgeKind::Data)).map(|(n, _)| *n).collect()
    }

    pub fn set_gc(&mut self, on: bool) {
        self.gc = on;
        if on {
            let done: Vec<NodeId> = self.kernels().filter(|(_, k)| k.state == KernelState::Done).map(|(id, _)| id).collect();
            for id in done {
                self.gc_try(id);
            }
        }
    }

    fn add_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) {
        if src == dst && kind != EdgeKind::Read && kind != EdgeKind::Write {
            return;
        }
        self.out.entry(src).or_default().insert((dst, kind));
        self.inc.entry(dst).or_default().insert((src, kind));
    }

    fn buffer_node(&mut self, h: BufferHandle) -> NodeId {
        if let Some(id) = self.buffer_nodes.get(&h) {
            return *id;
        }
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(id, Node::Buffer(h));
        self.buffer_nodes.insert(h, id);
        id
    }

    /// Appends a kernel with its (speculated or exact) access sets.
    pub fn add_kernel(
        &mut self,
        call: Arc<ApiCall>,
        reads: &BTreeSet<BufferHandle>,
        writes: &BTreeSet<BufferHandle>,
        dev: &Device,
    ) -> Result<NodeId, DagError> {
        for h in reads.iter().chain(writes) {
            if !dev.get(*h).is_some_and(|b| b.is_active()) {
                return Err(DagError::FreedBuffer(*h));
            }
        }
        let stream = call.stream_id();
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(
            id,
            Node::Kernel(KernelNode {
                call,
                stream,
                reads: reads.iter().copied().collect(),
                writes: writes.iter().copied().collect(),
                state: KernelState::Pending,
            }),
        );
        self.link_kernel(id);
        debug_assert!(self.is_acyclic());
        Ok(id)
    }

    fn link_kernel(&mut self, id: NodeId) {
        let k = self.kernel(id).expect("kernel exists").clone();
        if let Some(tail) = self.stream_tails.get(&k.stream).copied() {
            if self.nodes.contains_key(&tail) {
                self.add_edge(tail, id, EdgeKind::Fifo);
            }
        }
        self.stream_tails.insert(k.stream, id);
        for r in &k.reads {
            let b = self.buffer_node(*r);
            self.add_edge(b, id, EdgeKind::Read);
            if let Some(w) = self.last_writer.get(r).copied() {
                self.add_edge(w, id, EdgeKind::Data);
            }
        }
        for w in &k.writes {
            let b = self.buffer_node(*w);
            self.add_edge(id, b, EdgeKind::Write);
            if let Some(prev) = self.last_writer.get(w).copied() {
                self.add_edge(prev, id, EdgeKind::Data);
            }
            for rd in self.readers.remove(w).unwrap_or_default() {
                self.add_edge(rd, id, EdgeKind::Data);
            }
            self.last_writer.insert(*w, id);
        }
        for r in &k.reads {
            if !k.writes.contains(r) {
                self.readers.entry(*r).or_default().push(id);
            }
        }
    }

    pub fn mark_running(&mut self, id: NodeId) -> Result<(), DagError> {
        match self.nodes.get_mut(&id) {
            Some(Node::Kernel(k)) if k.state == KernelState::Pending => {
                k.state = KernelState::Running;
                Ok(())
            }
            _ => Err(DagError::BadState(id)),
        }
    }

    /// Marks a running kernel Done and returns its write set.
    pub fn on_kernel_complete(&mut self, id: NodeId) -> Result<Vec<BufferHandle>, DagError> {
        let writes = match self.nodes.get_mut(&id) {
            Some(Node::Kernel(k)) if k.state == KernelState::Running => {
                k.state = KernelState::Done;
                k.writes.clone()
            }
            _ => return Err(DagError::BadState(id)),
        };
        if self.gc {
            let preds = self.kernel_preds(id);
            self.gc_try(id);
            for p in preds {
                self.gc_try(p);
            }
        }
        Ok(writes)
    }

    fn gc_try(&mut self, id: NodeId) {
        let Some(k) = self.kernel(id) else { return };
        if k.state != KernelState::Done {
            return;
        }
        let blocked = self.kernel_succs(id).iter().any(|s| self.kernel(*s).is_some_and(|k| k.state != KernelState::Done));
        if !blocked {
            self.remove_node(id);
        }
    }

    fn remove_node(&mut self, id: NodeId) {
        let Some(node) = self.nodes.remove(&id) else { return };
        let mut touched = Vec::new();
        for (d, k) in self.out.remove(&id).unwrap_or_default() {
            if let Some(s) = self.inc.get_mut(&d) {
                s.remove(&(id, k));
            }
            touched.push(d);
        }
        for (s, k) in self.inc.remove(&id).unwrap_or_default() {
            if let Some(o) = self.out.get_mut(&s) {
                o.remove(&(id, k));
            }
            touched.push(s);
        }
        match node {
            Node::Kernel(k) => {
                if self.stream_tails.get(&k.stream) == Some(&id) {
                    self.stream_tails.remove(&k.stream);
                }
                for w in &k.writes {
                    if self.last_writer.get(w) == Some(&id) {
                        self.last_writer.remove(w);
                    }
                }
                for r in &k.reads {
                    if let Some(v) = self.readers.get_mut(r) {
                        v.retain(|x| *x != id);
                        if v.is_empty() {
                            self.readers.remove(r);
                        }
                    }
                }
                for t in touched {
                    if matches!(self.nodes.get(&t), Some(Node::Buffer(_)))
                        && self.out.get(&t).is_none_or(BTreeSet::is_empty)
                        && self.inc.get(&t).is_none_or(BTreeSet::is_empty)
                    {
                        self.remove_node(t);
                    }
                }
            }
            Node::Buffer(h) => {
                self.buffer_nodes.remove(&h);
                self.out.remove(&id);
                self.inc.remove(&id);
            }
        }
        self.out.retain(|_, s| !s.is_empty());
        self.inc.retain(|_, s| !s.is_empty());
    }

    /// Removes the scope's Done kernels (and orphaned buffers). Returns the
    /// removed kernels' ids, which is what a pre-clear pass observes.
    pub fn clear(&mut self, scope: Scope) -> Result<Vec<NodeId>, DagError> {
        let in_scope: Vec<(NodeId, KernelState)> = self
            .kernels()
            .filter(|(_, k)| match scope {
                Scope::Device => true,
                Scope::Stream(s) => k.stream == s,
            })
            .map(|(id, k)| (id, k.state))
            .collect();
        let not_done = in_scope.iter().filter(|(_, s)| *s != KernelState::Done).count();
        if not_done > 0 {
            return Err(DagError::PendingKernels(not_done));
        }
        let ids: Vec<NodeId> = in_scope.into_iter().map(|(id, _)| id).collect();
        for id in &ids {
            self.remove_node(*id);
        }
        Ok(ids)
    }

    /// Buffers in load order: for each not-yet-Done kernel in a stable
    /// topological order, its reads and then its first writes; every other
    /// buffer of `universe` follows in handle order.
    pub fn topo_order_buffers(&self, universe: &[BufferHandle]) -> Vec<BufferHandle> {
        let in_universe: BTreeSet<BufferHandle> = universe.iter().copied().collect();
        let mut out = Vec::with_capacity(universe.len());
        let mut seen = BTreeSet::new();
        for id in self.pending_topo_order() {
            let k = self.kernel(id).unwrap();
            for h in k.reads.iter().chain(&k.writes) {
                if in_universe.contains(h) && seen.insert(*h) {
                    out.push(*h);
                }
            }
        }
        out.extend(in_universe.into_iter().filter(|h| !seen.contains(h)));
        out
    }

    /// Kahn's algorithm over not-yet-Done kernels, ties broken by node id.
    pub fn pending_topo_order(&self) -> Vec<NodeId> {
        let pending: BTreeSet<NodeId> = self.kernels().filter(|(_, k)| k.state != KernelState::Done).map(|(id, _)| id).collect();
        let mut indeg: BTreeMap<NodeId, usize> =
            pending.iter().map(|id| (*id, self.kernel_preds(*id).iter().filter(|p| pending.contains(p)).count())).collect();
        let mut ready: BinaryHeap<Reverse<NodeId>> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| Reverse(*id)).collect();
        let mut order = Vec::with_capacity(pending.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for s in self.kernel_succs(id) {
                if let Some(d) = indeg.get_mut(&s) {
                    *d -= 1;
                    if *d == 0 {
                        ready.push(Reverse(s));
                    }
                }
            }
        }
        order
    }

    pub fn is_acyclic(&self) -> bool {
        let kernels: Vec<NodeId> = self.kernels().map(|(id, _)| id).collect();
        let mut indeg: HashMap<NodeId, usize> = kernels.iter().map(|id| (*id, self.kernel_preds(*id).len())).collect();
        let mut stack: Vec<NodeId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut seen = 0;
        while let Some(id) = stack.pop() {
            seen += 1;
            for s in self.kernel_succs(id) {
                let d = indeg.get_mut(&s).expect("edge to existing kernel");
                *d -= 1;
                if *d == 0 {
                    stack.push(s);
                }
            }
        }
        seen == kernels.len()
    }

    /// The not-yet-Done kernels, the buffers they touch, and the edges among them.
    pub fn pending_subgraph(&self) -> KernelDag {
        let keep: BTreeSet<NodeId> =
            self.nodes.iter().filter(|(_, n)| matches!(n, Node::Kernel(k) if k.state != KernelState::Done)).map(|(id, _)| *id).collect();
        let mut g = KernelDag { next_id: self.next_id, gc: self.gc, ..Default::default() };
        let mut nodes: BTreeMap<NodeId, Node> = keep.iter().map(|id| (*id, self.nodes[id].clone())).collect();
        for (s, d, k) in self.edges() {
            let endpoint_ok = |n: NodeId| keep.contains(&n) || matches!(self.nodes.get(&n), Some(Node::Buffer(_)));
            let kernel_side = match k {
                EdgeKind::Read => keep.contains(&d),
                EdgeKind::Write => keep.contains(&s),
                EdgeKind::Fifo | EdgeKind::Data => keep.contains(&s) && keep.contains(&d),
            };
            if kernel_side && endpoint_ok(s) && endpoint_ok(d) {
                for n in [s, d] {
                    nodes.entry(n).or_insert_with(|| self.nodes[&n].clone());
                }
                g.add_edge(s, d, k);
            }
        }
        g.nodes = nodes;
        g.rebuild_indexes();
        g
    }

    fn rebuild_indexes(&mut self) {
        self.buffer_nodes.clear();
        self.stream_tails.clear();
        self.last_writer.clear();
        self.readers.clear();
        let mut max_id = None;
        for (id, n) in &self.nodes {
            max_id = Some(*id);
            match n {
                Node::Buffer(h) => {
                    self.buffer_nodes.insert(*h, *id);
                }
                Node::Kernel(k) => {
                    self.stream_tails.insert(k.stream, *id);
                    for w in &k.writes {
                        self.last_writer.insert(*w, *id);
                        self.readers.remove(w);
                    }
                    for r in &k.reads {
                        if !k.writes.contains(r) {
                            self.readers.entry(*r).or_default().push(*id);
                        }
                    }
                }
            }
        }
        self.next_id = self.next_id.max(max_id.map_or(0, |m| m.0.saturating_add(1)));
    }

    // ---- wire format ---------------------------------------------------

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DAG_MAGIC);
        w.u32(DAG_VERSION);
        w.u32(self.nodes.len() as u32);
        for (id, n) in &self.nodes {
            w.prefixed_u32(|w| {
                w.u64(id.0);
                match n {
                    Node::Kernel(k) => {
                        w.u8(0);
                        w.u8(match k.state {
                            KernelState::Pending => 0,
                            KernelState::Running => 1,
                            KernelState::Done => 2,
                        });
                        w.u32(k.stream);
                        write_handles(w, &k.reads);
                        write_handles(w, &k.writes);
                        write_call(w, &k.call);
                    }
                    Node::Buffer(h) => {
                        w.u8(1);
                        w.u32(h.0);
                    }
                }
            });
        }
        w.u32(self.edge_count() as u32);
        for (s, d, k) in self.edges() {
            w.u64(s.0);
            w.u64(d.0);
            w.u8(k.code());
        }
        w.buf
    }

    pub fn deserialize(bytes: &[u8]) -> Result<KernelDag, DagError> {
        let mut r = Reader::new(bytes);
        let g = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(r.err::<()>("trailing bytes after DAG").unwrap_err().into());
        }
        Ok(g)
    }

    fn read_from(r: &mut Reader<'_>) -> Result<KernelDag, DagError> {
        if r.bytes(4)? != DAG_MAGIC {
            return Err(r.err::<()>("bad DAG magic").unwrap_err().into());
        }
        let ver = r.u32()?;
        if ver != DAG_VERSION {
            return Err(r.err::<()>(format!("unsupported DAG version {ver}")).unwrap_err().into());
        }
        let n = r.u32()?;
        let mut g = KernelDag { gc: true, ..Default::default() };
        for _ in 0..n {
            let len = r.u32()? as usize;
            let mut rec = r.section(len)?;
            let id = NodeId(rec.u64()?);
            if id.0 >= MAX_NODE_ID {
                return Err(rec.err::<()>("node id out of range").unwrap_err().into());
            }
            let node = match rec.u8()? {
                0 => {
                    let state = match rec.u8()? {
                        0 => KernelState::Pending,
                        1 => KernelState::Running,
                        2 => KernelState::Done,
                        s => return Err(rec.err::<()>(format!("bad kernel state {s}")).unwrap_err().into()),
                    };
                    let stream = rec.u32()?;
                    let reads = read_handles(&mut rec)?;
                    let writes = read_handles(&mut rec)?;
                    let call = read_call(&mut rec)?;
                    Node::Kernel(KernelNode { call: Arc::new(call), stream, reads, writes, state })
                }
                1 => Node::Buffer(BufferHandle(rec.u32()?)),
                k => return Err(rec.err::<()>(format!("bad node kind {k}")).unwrap_err().into()),
            };
            if !rec.is_empty() {
                return Err(rec.err::<()>("node record longer than its contents").unwrap_err().into());
            }
            if let Node::Buffer(h) = &node {
                if g.buffer_nodes.insert(*h, id).is_some() {
                    return Err(r.err::<()>(format!("duplicate buffer node {}", h.0)).unwrap_err().into());
                }
            }
            if g.nodes.insert(id, node).is_some() {
                return Err(r.err::<()>(format!("duplicate node id {}", id.0)).unwrap_err().into());
            }
        }
        let m = r.u32()?;
        r.checked_len(m as u64, 17)?;
        for _ in 0..m {
            let (s, d) = (NodeId(r.u64()?), NodeId(r.u64()?));
            let kind = EdgeKind::from_code(r.u8()?)
                .ok_or_else(|| DagError::from(WireError { offset: r.offset() - 1, reason: "bad edge kind".into() }))?;
            let is_kernel = |n: NodeId| matches!(g.nodes.get(&n), Some(Node::Kernel(_)));
            let is_buffer = |n: NodeId| matches!(g.nodes.get(&n), Some(Node::Buffer(_)));
            let ok = match kind {
                EdgeKind::Read => is_buffer(s) && is_kernel(d),
                EdgeKind::Write => is_kernel(s) && is_buffer(d),
                EdgeKind::Fifo | EdgeKind::Data => is_kernel(s) && is_kernel(d) && s != d,
            };
            if !ok {
                return Err(r.err::<()>(format!("edge {}->{} has bad endpoints", s.0, d.0)).unwrap_err().into());
            }
            g.add_edge(s, d, kind);
        }
        if !g.is_acyclic() {
            return Err(r.err::<()>("kernel edges form a cycle").unwrap_err().into());
        }
        g.rebuild_indexes();
        Ok(g)
    }
}

/// Node ids above this are rejected when parsing.
const MAX_NODE_ID: u64 = 1 << 48;

fn write_handles(w: &mut Writer, hs: &[BufferHandle]) {
    w.u32(hs.len() as u32);
    for h in hs {
        w.u32(h.0);
    }
}

fn read_handles(r: &mut Reader<'_>) -> WireResult<Vec<BufferHandle>> {
    let n = r.u32()? as u64;
    r.checked_len(n, 4)?;
    (0..n).map(|_| r.u32().map(BufferHandle)).collect()
}

fn write_u32s(w: &mut Writer, v: &[u32]) {
    w.u32(v.len() as u32);
    for x in v {
        w.u32(*x);
    }
}

fn read_u32s(r: &mut Reader<'_>) -> WireResult<Vec<u32>> {
    let n = r.u32()? as u64;
    r.checked_len(n, 4)?;
    (0..n).map(|_| r.u32()).collect()
}

pub(crate) fn write_call(w: &mut Writer, c: &ApiCall) {
    w.u64(c.seq);
    w.u8(c.kind.code());
    match c.stream {
        Some(s) => {
            w.u8(1);
            w.u32(s);
        }
        None => {
            w.u8(0);
            w.u32(0);
        }
    }
    match &c.kernel_name {
        Some(n) => {
            let b = &n.as_bytes()[..n.len().min(0xFFFE)];
            w.u16(b.len() as u16);
            w.bytes(b);
        }
        None => w.u16(0xFFFF),
    }
    w.u32(c.args.len() as u32);
    for a in &c.args {
        w.u64(a.v);
        w.u32(a.size);
    }
    w.u64(c.bytes);
    w.u64(c.duration_ns);
    write_u32s(w, &c.true_reads);
    write_u32s(w, &c.true_writes);
}

pub(crate) fn read_call(r: &mut Reader<'_>) -> WireResult<ApiCall> {
    let seq = r.u64()?;
    let code = r.u8()?;
    let kind = match ApiKind::from_code(code) {
        Some(k) => k,
        None => return r.err(format!("bad api kind {code}")),
    };
    let has_stream = r.u8()?;
    let s = r.u32()?;
    let stream = match has_stream {
        0 if s == 0 => None,
        1 => Some(s),
        _ => return r.err("bad stream tag"),
    };
    let name_len = r.u16()?;
    let kernel_name = if name_len == 0xFFFF {
        None
    } else {
        match std::str::from_utf8(r.bytes(name_len as usize)?) {
            Ok(s) => Some(s.to_string()),
            Err(_) => return r.err("kernel name is not utf-8"),
        }
    };
    let nargs = r.u32()? as u64;
    r.checked_len(nargs, 12)?;
    let mut args = Vec::with_capacity(nargs as usize);
    for _ in 0..nargs {
        args.push(Arg { v: r.u64()?, size: r.u32()? });
    }
    Ok(ApiCall {
        seq,
        kind,
        stream,
        kernel_name,
        args,
        bytes: r.u64()?,
        duration_ns: r.u64()?,
        true_reads: read_u32s(r)?,
        true_writes: read_u32s(r)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize) -> (Device, Vec<BufferHandle>) {
        let mut d = Device::new(1 << 30, 4096);
        let hs = (0..n).map(|_| d.alloc(64).unwrap()).collect();
        (d, hs)
    }

    fn set(v: &[BufferHandle]) -> BTreeSet<BufferHandle> {
        v.iter().copied().collect()
    }

    fn call(seq: u64, stream: u32) -> Arc<ApiCall> {
        Arc::new(ApiCall { seq, kind: ApiKind::LaunchKnown, stream: Some(stream), ..Default::default() })
    }

    #[test]
    fn fig_flow_edges() {
        let (d, b) = setup(3);
        let mut g = KernelDag::new();
        let k0 = g.add_kernel(call(0, 0), &set(&[b[1]]), &set(&[b[1], b[2]]), &d).unwrap();
        let edges: BTreeSet<_> = g.edges().collect();
        let bn = |h: BufferHandle| g.buffer_nodes[&h];
        assert!(edges.contains(&(bn(b[1]), k0, EdgeKind::Read)));
        assert!(edges.contains(&(k0, bn(b[1]), EdgeKind::Write)));
        assert!(edges.contains(&(k0, bn(b[2]), EdgeKind::Write)));
        assert_eq!(edges.len(), 3);
    }

    #[test]
    fn same_stream_gets_fifo_edge_even_without_data() {
        let (d, b) = setup(2);
        let mut g = KernelDag::new();
        let k0 = g.add_kernel(call(0, 0), &set(&[]), &set(&[b[0]]), &d).unwrap();
        let k1 = g.add_kernel(call(1, 0), &set(&[]), &set(&[b[1]]), &d).unwrap();
        let k2 = g.add_kernel(call(2, 1), &set(&[]), &set(&[]), &d).unwrap();
        assert_eq!(g.kernel_preds(k1), vec![k0]);
        assert!(g.kernel_preds(k2).is_empty());
    }

    #[test]
    fn freed_buffer_rejected() {
        let (mut d, b) = setup(1);
        d.free(b[0]).unwrap();
        let mut g = KernelDag::new();
        assert_eq!(g.add_kernel(call(0, 0), &set(&b), &set(&[]), &d), Err(DagError::FreedBuffer(b[0])));
    }

    #[test]
    fn completion_returns_write_set_and_gc_clears() {
        let (d, b) = setup(2);
        let mut g = KernelDag::new();
        let k0 = g.add_kernel(call(0, 0), &set(&[]), &set(&b), &d).unwrap();
        assert_eq!(g.on_kernel_complete(k0), Err(DagError::BadState(k0)));
        g.mark_running(k0).unwrap();
        assert_eq!(g.on_kernel_complete(k0).unwrap(), b);
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn deferred_gc_and_clear() {
        let (d, b) = setup(2);
        let mut g = KernelDag::new();
        g.set_gc(false);
        let k0 = g.add_kernel(call(0, 0), &set(&[b[0]]), &set(&[b[1]]), &d).unwrap();
        let k1 = g.add_kernel(call(1, 0), &set(&[b[1]]), &set(&[b[0]]), &d).unwrap();
        g.mark_running(k0).unwrap();
        g.on_kernel_complete(k0).unwrap();
        assert_eq!(g.clear(Scope::Device), Err(DagError::PendingKernels(1)));
        g.mark_running(k1).unwrap();
        g.on_kernel_complete(k1).unwrap();
        assert_eq!(g.kernel_count(), 2);
        assert_eq!(g.clear(Scope::Device).unwrap(), vec![k0, k1]);
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn stream_clear_leaves_other_streams() {
        let (d, b) = setup(2);
        let mut g = KernelDag::new();
        g.set_gc(false);
        let k0 = g.add_kernel(call(0, 0), &set(&[]), &set(&[b[0]]), &d).unwrap();
        g.add_kernel(call(1, 1), &set(&[]), &set(&[b[1]]), &d).unwrap();
        g.mark_running(k0).unwrap();
        g.on_kernel_complete(k0).unwrap();
        assert_eq!(g.clear(Scope::Stream(0)).unwrap(), vec![k0]);
        assert_eq!(g.kernel_count(), 1);
    }

    #[test]
    fn topo_chain_and_empty() {
        let (d, b) = setup(4);
        let mut g = KernelDag::new();
        assert_eq!(g.topo_order_buffers(&b), b);
        g.add_kernel(call(0, 0), &set(&[b[2]]), &set(&[b[1]]), &d).unwrap();
        g.add_kernel(call(1, 1), &set(&[b[1]]), &set(&[b[0]]), &d).unwrap();
        assert_eq!(g.topo_order_buffers(&b), vec![b[2], b[1], b[0], b[3]]);
    }

    #[test]
    fn empty_dag_is_sixteen_bytes() {
        let g = KernelDag::new();
        let bytes = g.serialize();
        assert_eq!(bytes.len(), 16);
        assert_eq!(KernelDag::deserialize(&bytes).unwrap(), g);
    }

    #[test]
    fn round_trip_and_truncation() {
        let (d, b) = setup(3);
        let mut g = KernelDag::new();
        let mut c = (*call(0, 0)).clone();
        c.kernel_name = Some("k".into());
        c.args = vec![Arg::ptr(7)];
        c.true_writes = vec![1];
        g.add_kernel(Arc::new(c), &set(&[b[0]]), &set(&[b[1]]), &d).unwrap();
        g.add_kernel(call(1, 0), &set(&[b[1]]), &set(&[b[2]]), &d).unwrap();
        let bytes = g.serialize();
        let back = KernelDag::deserialize(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.serialize(), bytes);
        for cut in [0, 3, 15, bytes.len() - 1] {
            assert!(matches!(KernelDag::deserialize(&bytes[..cut]), Err(DagError::CorruptDag { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(KernelDag::deserialize(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(KernelDag::deserialize(&long).is_err());
    }

    #[test]
    fn pending_subgraph_drops_done_kernels() {
        let (d, b) = setup(3);
        let mut g = KernelDag::new();
        g.set_gc(false);
        let k0 = g.add_kernel(call(0, 0), &set(&[b[0]]), &set(&[b[1]]), &d).unwrap();
        let k1 = g.add_kernel(call(1, 0), &set(&[b[1]]), &set(&[b[2]]), &d).unwrap();
        g.mark_running(k0).unwrap();
        g.on_kernel_complete(k0).unwrap();
        let p = g.pending_subgraph();
        assert_eq!(p.kernels().map(|(id, _)| id).collect::<Vec<_>>(), vec![k1]);
        assert!(p.kernel_preds(k1).is_empty());
        assert_eq!(p.edge_count(), 2);
    }
}
