//! Bandwidth-limited transfer channels with two priority classes.
//!
//! A channel moves one chunk at a time. Application-priority jobs always
//! take the next chunk slot; checkpoint-priority jobs only get the channel
//! while no application job is queued. A chunk that is already in flight
//! always finishes.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Pcie,
    Device,
    Network,
    Checksum,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Pcie, Channel::Device, Channel::Network, Channel::Checksum];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    App,
    Ckpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JobId(pub u64);

#[derive(Debug, Clone)]
struct Job {
    total: u64,
    started: u64,
    priority: Priority,
    cancelled: bool,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    job: JobId,
    offset: u64,
    len: u64,
    done_at: SimTime,
}

/// One finished chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkDone {
    pub job: JobId,
    pub offset: u64,
    pub len: u64,
    /// Last chunk of the job.
    pub complete: bool,
    /// The job was cancelled while this chunk was in flight.
    pub cancelled: bool,
}

#[derive(Debug, Clone)]
pub struct Link {
    bw: u64,
    chunk: u64,
    app: VecDeque<JobId>,
    ckpt: VecDeque<JobId>,
    /// Single FIFO used when priorities are ignored.
    blind: bool,
    jobs: HashMap<JobId, Job>,
    in_flight: Option<InFlight>,
    carry: u128,
    busy_ns: u64,
}

impl Link {
    pub fn new(bw: u64, chunk: u64) -> Self {
        assert!(bw > 0 && chunk > 0);
        Self {
            bw,
            chunk,
            app: VecDeque::new(),
            ckpt: VecDeque::new(),
            blind: false,
            jobs: HashMap::new(),
            in_flight: None,
            carry: 0,
            busy_ns: 0,
        }
    }

    /// Serve jobs in arrival order regardless of priority.
    pub fn priority_blind(mut self) -> Self {
        self.blind = true;
        self
    }

    pub fn bandwidth(&self) -> u64 {
        self.bw
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunk
    }

    pub fn busy_ns(&self) -> u64 {
        self.busy_ns
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_none()
    }

    pub fn has_pending(&self) -> bool {
        !self.app.is_empty() || !self.ckpt.is_empty()
    }

    pub fn has_app_pending(&self) -> bool {
        !self.app.is_empty() || self.in_flight.is_some_and(|f| self.jobs.get(&f.job).is_some_and(|j| j.priority == Priority::App))
    }

    pub fn enqueue(&mut self, id: JobId, bytes: u64, priority: Priority) {
        assert!(bytes > 0, "zero-byte transfer");
        self.jobs.insert(id, Job { total: bytes, started: 0, priority, cancelled: false });
        if priority == Priority::App && !self.blind {
            self.app.push_back(id);
        } else {
            self.ckpt.push_back(id);
        }
    }

    pub fn contains(&self, id: JobId) -> bool {
        self.jobs.get(&id).is_some_and(|j| !j.cancelled)
    }

    /// Moves a queued checkpoint-priority job to the back of the app queue.
    pub fn promote(&mut self, id: JobId) -> bool {
        let Some(job) = self.jobs.get_mut(&id) else { return false };
        if job.priority == Priority::App || job.cancelled {
            return false;
        }
        job.priority = Priority::App;
        if self.blind {
            return true;
        }
        if let Some(pos) = self.ckpt.iter().position(|j| *j == id) {
            self.ckpt.remove(pos);
            self.app.push_back(id);
        }
        true
    }

    /// Cancels a job. An in-flight chunk still completes and is reported
    /// with `cancelled = true`.
    pub fn cancel(&mut self, id: JobId) -> bool {
        let in_flight = self.in_flight.is_some_and(|f| f.job == id);
        let Some(job) = self.jobs.get_mut(&id) else { return false };
        if job.cancelled {
            return false;
        }
        job.cancelled = true;
        self.app.retain(|j| *j != id);
        self.ckpt.retain(|j| *j != id);
        if !in_flight {
            self.jobs.remove(&id);
        }
        true
    }

    fn chunk_ns(&mut self, len: u64) -> u64 {
        let num = len as u128 * 1_000_000_000 + self.carry;
        self.carry = num % self.bw as u128;
        (num / self.bw as u128) as u64
    }

    /// Starts the next chunk if the link is idle. Returns its completion time.
    pub fn start_next(&mut self, now: SimTime) -> Option<SimTime> {
        if self.in_flight.is_some() {
            return None;
        }
        let id = *self.app.front().or_else(|| self.ckpt.front())?;
        let job = self.jobs.get_mut(&id).expect("queued job exists");
        let offset = job.started;
        let len = self.chunk.min(job.total - offset);
        job.started += len;
        if job.started == job.total {
            self.app.retain(|j| *j != id);
            self.ckpt.retain(|j| *j != id);
        }
        let dur = self.chunk_ns(len);
        self.busy_ns += dur;
        let done_at = now + dur;
        self.in_flight = Some(InFlight { job: id, offset, len, done_at });
        Some(done_at)
    }

    pub fn in_flight_done_at(&self) -> Option<SimTime> {
        self.in_flight.map(|f| f.done_at)
    }

    /// Completes the in-flight chunk.
    pub fn finish_chunk(&mut self) -> Option<ChunkDone> {
        let f = self.in_flight.take()?;
        let job = self.jobs.get(&f.job).expect("in-flight job exists");
        let cancelled = job.cancelled;
        let complete = cancelled || f.offset + f.len == job.total;
        if complete {
            self.jobs.remove(&f.job);
        }
        Some(ChunkDone { job: f.job, offset: f.offset, len: f.len, complete, cancelled })
    }

    /// Bytes that must move before `id` completes, counting queue order
    /// (app queue first) and the in-flight chunk.
    pub fn bytes_until_done(&self, id: JobId) -> Option<u64> {
        let job = self.jobs.get(&id)?;
        if job.cancelled {
            return None;
        }
        let mut total = self.in_flight.map_or(0, |f| f.len);
        for q in self.app.iter().chain(self.ckpt.iter()) {
            let j = &self.jobs[q];
            total += j.total - j.started;
            if *q == id {
                return Some(total);
            }
        }
        // Fully started: only the in-flight chunk remains.
        Some(total)
    }

    pub fn estimate_ns(&self, bytes: u64) -> u64 {
        crate::config::Config::transfer_ns(bytes, self.bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(link: &mut Link, mut now: SimTime) -> Vec<(SimTime, ChunkDone)> {
        let mut out = vec![];
        while let Some(t) = link.start_next(now) {
            now = t;
            out.push((t, link.finish_chunk().unwrap()));
        }
        out
    }

    #[test]
    fn exact_aggregate_time() {
        let mut l = Link::new(22_000_000_000, 64 * 1024);
        l.enqueue(JobId(1), 22_000_000_000, Priority::Ckpt);
        let done = drain(&mut l, 0);
        assert_eq!(done.last().unwrap().0, 1_000_000_000);
        assert!(done.last().unwrap().1.complete);
    }

    #[test]
    fn app_preempts_at_chunk_granularity() {
        let mut l = Link::new(1_000_000_000, 1000);
        l.enqueue(JobId(1), 3000, Priority::Ckpt);
        assert_eq!(l.start_next(0), Some(1000));
        l.enqueue(JobId(2), 1000, Priority::App);
        let c = l.finish_chunk().unwrap();
        assert_eq!((c.job, c.offset), (JobId(1), 0));
        let rest = drain(&mut l, 1000);
        assert_eq!(rest[0].1.job, JobId(2));
        assert_eq!(rest[0].0, 2000);
        assert_eq!(rest.last().unwrap().0, 4000);
    }

    #[test]
    fn cancel_and_estimate() {
        let mut l = Link::new(1_000_000_000, 1000);
        l.enqueue(JobId(1), 2500, Priority::Ckpt);
        l.enqueue(JobId(2), 500, Priority::Ckpt);
        assert_eq!(l.bytes_until_done(JobId(2)), Some(3000));
        l.start_next(0);
        assert_eq!(l.bytes_until_done(JobId(1)), Some(2500));
        assert!(l.cancel(JobId(1)));
        let c = l.finish_chunk().unwrap();
        assert!(c.cancelled && c.complete);
        let rest = drain(&mut l, 1000);
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].1.job, JobId(2));
    }

    #[test]
    fn promote_moves_job_ahead() {
        let mut l = Link::new(1_000_000_000, 1000);
        l.enqueue(JobId(1), 1000, Priority::Ckpt);
        l.enqueue(JobId(2), 1000, Priority::Ckpt);
        assert!(l.promote(JobId(2)));
        let order: Vec<_> = drain(&mut l, 0).into_iter().map(|(_, c)| c.job).collect();
        assert_eq!(order, vec![JobId(2), JobId(1)]);
    }
}
