use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use super::clock::{EventQueue, SimTime};
use super::effects::{self, mix};
use super::link::{Channel, ChunkDone, JobId, Link, Priority};
use super::memory::{BufferHandle, Device, HostMemory, StreamId};
use super::SimError;
use crate::api::ApiCall;
use crate::config::{Config, DEVICE_ADDR_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId(pub u64);

/// Device-side work queued on a stream.
#[derive(Debug, Clone)]
pub enum Work {
    Kernel { call: Arc<ApiCall>, duration_ns: u64 },
    H2D { dst: BufferHandle, offset: u64, data: Arc<[u8]> },
    D2H { src: BufferHandle, offset: u64, len: u64, host_addr: u64 },
    D2D { src: BufferHandle, src_offset: u64, dst: BufferHandle, dst_offset: u64, len: u64 },
}

impl Work {
    fn channel(&self) -> Option<(Channel, u64)> {
        match self {
            Work::Kernel { .. } => None,
            Work::H2D { data, .. } => Some((Channel::Pcie, data.len() as u64)),
            Work::D2H { len, .. } => Some((Channel::Pcie, *len)),
            Work::D2D { len, .. } => Some((Channel::Device, *len)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locator {
    Host {
        addr: u64,
    },
    Device {
        handle: BufferHandle,
        offset: u64,
    },
    /// The remote end of the network link.
    Peer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Until {
    Time(SimTime),
    Quiescent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    OpStarted {
        op: OpId,
        at: SimTime,
    },
    OpDone {
        op: OpId,
        started_at: SimTime,
    },
    /// A chunk of a job submitted through [`Machine::transfer`].
    Chunk {
        channel: Channel,
        done: ChunkDone,
    },
    Timer(u64),
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    OpDone(OpId),
    Chunk(Channel),
    Timer(u64),
}

#[derive(Debug)]
struct Op {
    stream: StreamId,
    work: Work,
    held: bool,
    started_at: Option<SimTime>,
}

#[derive(Debug, Default)]
struct Stream {
    /// Head is the running op, if any.
    queue: VecDeque<OpId>,
    held: usize,
}

/// The simulated GPU: compute streams, transfer channels and memories.
#[derive(Debug)]
pub struct Machine {
    queue: EventQueue<Ev>,
    pub dev: Device,
    pub host: HostMemory,
    links: Vec<Link>,
    streams: BTreeMap<StreamId, Stream>,
    ops: HashMap<OpId, Op>,
    job_op: HashMap<JobId, OpId>,
    next_op: u64,
    next_job: u64,
    notices: Vec<Notice>,
    event_cap: u64,
    trace_digest: u64,
}

impl Machine {
    pub fn new(cfg: &Config) -> Self {
        let bw = |c: Channel| match c {
            Channel::Pcie => cfg.pcie_bw,
            Channel::Device => cfg.device_bw,
            Channel::Network => cfg.network_bw,
            Channel::Checksum => cfg.checksum_bw,
        };
        let mut streams = BTreeMap::new();
        streams.insert(StreamId(0), Stream::default());
        Self {
            queue: EventQueue::new(),
            dev: Device::new(cfg.device_capacity, cfg.chunk_size),
            host: HostMemory::new(cfg.page_size),
            links: Channel::ALL.iter().map(|c| Link::new(bw(*c), cfg.chunk_size)).collect(),
            streams,
            ops: HashMap::new(),
            job_op: HashMap::new(),
            next_op: 0,
            next_job: 0,
            notices: Vec::new(),
            event_cap: cfg.event_cap,
            trace_digest: 0,
        }
    }

    /// Replaces every channel with a priority-blind one (baseline comparisons).
    pub fn priority_blind(mut self) -> Self {
        self.links = self.links.into_iter().map(Link::priority_blind).collect();
        self
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn events_processed(&self) -> u64 {
        self.queue.processed()
    }

    /// Rolling digest of every processed event (time, kind, id).
    pub fn trace_digest(&self) -> u64 {
        self.trace_digest
    }

    pub fn link(&self, c: Channel) -> &Link {
        &self.links[c.index()]
    }

    // ---- streams -------------------------------------------------------

    pub fn create_stream(&mut self, s: StreamId) {
        self.streams.entry(s).or_default();
    }

    pub fn destroy_stream(&mut self, s: StreamId) -> Result<(), SimError> {
        match self.streams.get(&s) {
            None => Err(SimError::UnknownStream(s)),
            Some(st) if !st.queue.is_empty() => Err(SimError::StreamBusy(s)),
            Some(_) => {
                self.streams.remove(&s);
                Ok(())
            }
        }
    }

    pub fn has_stream(&self, s: StreamId) -> bool {
        self.streams.contains_key(&s)
    }

    pub fn stream_ids(&self) -> Vec<StreamId> {
        self.streams.keys().copied().collect()
    }

    /// Ops queued or running on `s`.
    pub fn stream_len(&self, s: StreamId) -> usize {
        self.streams.get(&s).map_or(0, |st| st.queue.len())
    }

    pub fn stream_idle(&self, s: StreamId) -> bool {
        self.stream_len(s) == 0
    }

    pub fn stream_has_held(&self, s: StreamId) -> bool {
        self.streams.get(&s).is_some_and(|st| st.held > 0)
    }

    pub fn any_held(&self) -> bool {
        self.streams.values().any(|st| st.held > 0)
    }

    pub fn all_idle(&self) -> bool {
        self.streams.values().all(|st| st.queue.is_empty())
    }

    /// True when every queued op is held and none is running.
    pub fn only_held_remaining(&self) -> bool {
        self.ops.values().all(|o| o.held && o.started_at.is_none())
    }

    pub fn running_ops(&self) -> usize {
        self.ops.values().filter(|o| o.started_at.is_some()).count()
    }

    // ---- ops -----------------------------------------------------------

    pub fn submit(&mut self, stream: StreamId, work: Work, held: bool) -> Result<OpId, SimError> {
        let st = self.streams.get_mut(&stream).ok_or(SimError::UnknownStream(stream))?;
        let id = OpId(self.next_op);
        self.next_op += 1;
        st.queue.push_back(id);
        if held {
            st.held += 1;
        }
        self.ops.insert(id, Op { stream, work, held, started_at: None });
        Ok(id)
    }

    pub fn set_held(&mut self, op: OpId, held: bool) {
        let Some(o) = self.ops.get_mut(&op) else { return };
        if o.held == held || o.started_at.is_some() {
            return;
        }
        o.held = held;
        let st = self.streams.get_mut(&o.stream).expect("op stream exists");
        if held {
            st.held += 1;
        } else {
            st.held -= 1;
        }
    }

    pub fn is_started(&self, op: OpId) -> bool {
        self.ops.get(&op).is_none_or(|o| o.started_at.is_some())
    }

    pub fn is_done(&self, op: OpId) -> bool {
        !self.ops.contains_key(&op)
    }

    // ---- transfers -----------------------------------------------------

    /// Queues a raw transfer whose chunks are reported as [`Notice::Chunk`].
    pub fn transfer_raw(&mut self, channel: Channel, bytes: u64, prio: Priority) -> JobId {
        let id = JobId(self.next_job);
        self.next_job += 1;
        self.links[channel.index()].enqueue(id, bytes, prio);
        id
    }

    pub fn transfer(&mut self, src: Locator, dst: Locator, bytes: u64, channel: Channel, prio: Priority) -> Result<JobId, SimError> {
        if bytes == 0 {
            return Err(SimError::InvalidLocator("zero-byte transfer".into()));
        }
        self.check_locator(src, bytes)?;
        self.check_locator(dst, bytes)?;
        Ok(self.transfer_raw(channel, bytes, prio))
    }

    fn check_locator(&self, loc: Locator, bytes: u64) -> Result<(), SimError> {
        match loc {
            Locator::Host { addr } if addr.checked_add(bytes).is_some_and(|e| e <= DEVICE_ADDR_BASE) => Ok(()),
            Locator::Host { addr } => Err(SimError::InvalidLocator(format!("host range {addr:#x}+{bytes}"))),
            Locator::Device { handle, offset } => {
                let b = self.dev.active(handle)?;
                if offset.checked_add(bytes).is_none_or(|e| e > b.size) {
                    return Err(SimError::InvalidLocator(format!("device range {offset}+{bytes} in {handle:?}")));
                }
                Ok(())
            }
            Locator::Peer => Ok(()),
        }
    }

    pub fn cancel_job(&mut self, channel: Channel, job: JobId) -> bool {
        self.links[channel.index()].cancel(job)
    }

    pub fn promote_job(&mut self, channel: Channel, job: JobId) -> bool {
        self.links[channel.index()].promote(job)
    }

    pub fn bytes_until_done(&self, channel: Channel, job: JobId) -> Option<u64> {
        self.links[channel.index()].bytes_until_done(job)
    }

    pub fn estimate_ns(&self, channel: Channel, bytes: u64) -> u64 {
        self.links[channel.index()].estimate_ns(bytes)
    }

    // ---- timeline ------------------------------------------------------

    pub fn timer(&mut self, at: SimTime, token: u64) -> Result<(), SimError> {
        self.queue.schedule(Ev::Timer(token), at).map(|_| ())
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    pub fn has_notices(&self) -> bool {
        !self.notices.is_empty()
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Starts every runnable op and idle channel.
    pub fn pump(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let mut to_start = Vec::new();
        for st in self.streams.values() {
            if let Some(head) = st.queue.front() {
                let op = &self.ops[head];
                if op.started_at.is_none() && !op.held {
                    to_start.push(*head);
                }
            }
        }
        for id in to_start {
            let op = self.ops.get_mut(&id).unwrap();
            op.started_at = Some(now);
            match op.work.channel() {
                None => {
                    let Work::Kernel { duration_ns, .. } = op.work else { unreachable!() };
                    self.queue.schedule(Ev::OpDone(id), now + duration_ns)?;
                }
                Some((ch, bytes)) => {
                    let job = JobId(self.next_job);
                    self.next_job += 1;
                    self.links[ch.index()].enqueue(job, bytes, Priority::App);
                    self.job_op.insert(job, id);
                }
            }
            self.notices.push(Notice::OpStarted { op: id, at: now });
        }
        for ch in Channel::ALL {
            if let Some(at) = self.links[ch.index()].start_next(now) {
                self.queue.schedule(Ev::Chunk(ch), at)?;
            }
        }
        Ok(())
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        self.pump()?;
        let Some((t, id, ev)) = self.queue.pop() else { return Ok(false) };
        if self.queue.processed() > self.event_cap {
            return Err(SimError::Livelock(self.event_cap));
        }
        let tag = match ev {
            Ev::OpDone(op) => 1 ^ (op.0 << 4),
            Ev::Chunk(c) => 2 ^ ((c.index() as u64) << 4),
            Ev::Timer(tok) => 3 ^ (tok << 4),
        };
        self.trace_digest = mix(self.trace_digest ^ mix(t ^ mix(tag ^ (id.0 << 1))));
        match ev {
            Ev::OpDone(op) => self.finish_op(op)?,
            Ev::Chunk(ch) => {
                let done = self.links[ch.index()].finish_chunk().expect("chunk in flight");
                match self.job_op.get(&done.job).copied() {
                    Some(op) if done.complete => {
                        self.job_op.remove(&done.job);
                        self.finish_op(op)?;
                    }
                    Some(_) => {}
                    None => self.notices.push(Notice::Chunk { channel: ch, done }),
                }
            }
            Ev::Timer(tok) => self.notices.push(Notice::Timer(tok)),
        }
        self.pump()?;
        Ok(true)
    }

    fn finish_op(&mut self, id: OpId) -> Result<(), SimError> {
        let op = self.ops.remove(&id).expect("finished op exists");
        let st = self.streams.get_mut(&op.stream).expect("op stream exists");
        let head = st.queue.pop_front();
        debug_assert_eq!(head, Some(id));
        match &op.work {
            Work::Kernel { call, .. } => effects::apply_kernel(&mut self.dev, call)?,
            Work::H2D { dst, offset, data } => effects::copy_h2d(&mut self.dev, *dst, *offset, data)?,
            Work::D2H { src, offset, len, host_addr } => effects::copy_d2h(&self.dev, &mut self.host, *src, *offset, *len, *host_addr)?,
            Work::D2D { src, src_offset, dst, dst_offset, len } => {
                effects::copy_d2d(&mut self.dev, *src, *src_offset, *dst, *dst_offset, *len)?
            }
        }
        self.notices.push(Notice::OpDone { op: id, started_at: op.started_at.expect("finished op started") });
        Ok(())
    }

    /// Runs without a driver, discarding notices.
    pub fn run_until(&mut self, until: Until) -> Result<SimTime, SimError> {
        self.pump()?;
        loop {
            match until {
                Until::Time(t) => {
                    if self.queue.peek_time().is_none_or(|next| next > t) {
                        self.queue.advance_to(t);
                        return Ok(self.now());
                    }
                }
                Until::Quiescent => {
                    if self.queue.is_empty() {
                        return Ok(self.now());
                    }
                }
            }
            self.step()?;
            self.notices.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::{ApiCall, ApiKind};

    fn kernel(seq: u64, dur: u64, w: Vec<u32>) -> Work {
        let call = ApiCall { seq, kind: ApiKind::LaunchKnown, true_writes: w, ..ApiCall::default() };
        Work::Kernel { call: Arc::new(call), duration_ns: dur }
    }

    fn started(notices: &[Notice]) -> Vec<(OpId, SimTime)> {
        notices
            .iter()
            .filter_map(|n| match n {
                Notice::OpStarted { op, at } => Some((*op, *at)),
                _ => None,
            })
            .collect()
    }

    fn run_collect(m: &mut Machine) -> Vec<Notice> {
        let mut all = Vec::new();
        while m.step().unwrap() {
            all.extend(m.take_notices());
        }
        all.extend(m.take_notices());
        all
    }

    #[test]
    fn empty_queue_is_quiescent_at_zero() {
        let mut m = Machine::new(&Config::default());
        assert_eq!(m.run_until(Until::Quiescent).unwrap(), 0);
    }

    #[test]
    fn one_22gb_transfer_takes_one_second() {
        let mut m = Machine::new(&Config::default());
        m.transfer(Locator::Host { addr: 0 }, Locator::Peer, 22_000_000_000, Channel::Pcie, Priority::Ckpt).unwrap();
        assert_eq!(m.run_until(Until::Quiescent).unwrap(), 1_000_000_000);
    }

    #[test]
    fn run_until_time_leaves_later_events() {
        let mut m = Machine::new(&Config::default());
        m.timer(11, 7).unwrap();
        assert_eq!(m.run_until(Until::Time(10)).unwrap(), 10);
        assert!(!m.is_quiescent());
    }

    #[test]
    fn pcie_copy_of_4_6gb_takes_about_206ms() {
        let mut m = Machine::new(&Config::default());
        m.transfer(Locator::Host { addr: 0 }, Locator::Peer, 4_600_000_000, Channel::Pcie, Priority::Ckpt).unwrap();
        let ms = m.run_until(Until::Quiescent).unwrap() as f64 / 1e6;
        assert!((ms - 206.0).abs() < 5.0, "{ms}");
    }

    fn completion_times(m: &mut Machine) -> HashMap<JobId, SimTime> {
        let mut done = HashMap::new();
        while m.step().unwrap() {
            for n in m.take_notices() {
                if let Notice::Chunk { done: c, .. } = n {
                    if c.complete {
                        done.insert(c.job, m.now());
                    }
                }
            }
        }
        done
    }

    #[test]
    fn device_copy_beats_pcie_copy() {
        let mut m = Machine::new(&Config::default());
        let gib = 1 << 30;
        let d = m.transfer_raw(Channel::Device, gib, Priority::Ckpt);
        let p = m.transfer_raw(Channel::Pcie, gib, Priority::Ckpt);
        let done = completion_times(&mut m);
        assert!(done[&d] < done[&p]);
        let cfg = Config::default();
        // Chunk times carry their remainders, so the total is the exact floor.
        assert_eq!(done[&d], gib * 1_000_000_000 / cfg.device_bw);
    }

    #[test]
    fn app_transfer_finishes_before_queued_ckpt_transfer() {
        let mut m = Machine::new(&Config::default());
        let ckpt = m.transfer_raw(Channel::Pcie, 1 << 20, Priority::Ckpt);
        let app = m.transfer_raw(Channel::Pcie, 1 << 20, Priority::App);
        let mut order = Vec::new();
        while m.step().unwrap() {
            for n in m.take_notices() {
                if let Notice::Chunk { done, .. } = n {
                    if done.complete {
                        order.push(done.job);
                    }
                }
            }
        }
        assert_eq!(order, vec![app, ckpt]);
    }

    #[test]
    fn same_stream_is_fifo_and_streams_overlap() {
        let mut m = Machine::new(&Config::default());
        let b = m.dev.alloc(64).unwrap();
        m.create_stream(StreamId(1));
        let a0 = m.submit(StreamId(0), kernel(0, 200_000, vec![b.0]), false).unwrap();
        let a1 = m.submit(StreamId(0), kernel(1, 100, vec![]), false).unwrap();
        let c0 = m.submit(StreamId(1), kernel(2, 50, vec![]), false).unwrap();
        let notices = run_collect(&mut m);
        let s: HashMap<_, _> = started(&notices).into_iter().collect();
        assert_eq!(s[&a0], 0);
        assert_eq!(s[&a1], 200_000);
        assert_eq!(s[&c0], 0);
        assert_eq!(m.now(), 200_100);
    }

    #[test]
    fn held_op_blocks_its_stream_only() {
        let mut m = Machine::new(&Config::default());
        m.create_stream(StreamId(1));
        let h = m.submit(StreamId(0), kernel(0, 10, vec![]), true).unwrap();
        let other = m.submit(StreamId(1), kernel(1, 10, vec![]), false).unwrap();
        let notices = run_collect(&mut m);
        assert_eq!(started(&notices), vec![(other, 0)]);
        assert!(m.stream_has_held(StreamId(0)));
        m.timer(100, 0).unwrap();
        m.set_held(h, false);
        let notices = run_collect(&mut m);
        assert_eq!(started(&notices)[0].0, h);
    }

    #[test]
    fn kernel_on_freed_buffer_fails() {
        let mut m = Machine::new(&Config::default());
        let b = m.dev.alloc(64).unwrap();
        m.dev.free(b).unwrap();
        m.submit(StreamId(0), kernel(0, 10, vec![b.0]), false).unwrap();
        assert!(matches!(m.run_until(Until::Quiescent), Err(SimError::UseAfterFree(_))));
    }

    #[test]
    fn invalid_locators_are_rejected() {
        let mut m = Machine::new(&Config::default());
        let b = m.dev.alloc(64).unwrap();
        let bad = Locator::Device { handle: b, offset: 32 };
        assert!(m.transfer(bad, Locator::Peer, 64, Channel::Pcie, Priority::App).is_err());
        let host_hi = Locator::Host { addr: DEVICE_ADDR_BASE - 8 };
        assert!(m.transfer(host_hi, Locator::Peer, 64, Channel::Pcie, Priority::App).is_err());
    }

    #[test]
    fn event_cap_reports_livelock() {
        let cfg = Config { event_cap: 3, ..Config::default() };
        let mut m = Machine::new(&cfg);
        for t in 0..10 {
            m.timer(t, t).unwrap();
        }
        assert_eq!(m.run_until(Until::Quiescent), Err(SimError::Livelock(3)));
    }
}
