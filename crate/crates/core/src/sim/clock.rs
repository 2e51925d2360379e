use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use super::SimError;

/// Simulated time in nanoseconds.
pub type SimTime = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

/// Deterministic event queue. Ties on time fire in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    payloads: std::collections::HashMap<u64, E>,
    cancelled: HashSet<u64>,
    processed: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self { now: 0, next_seq: 0, heap: BinaryHeap::new(), payloads: Default::default(), cancelled: HashSet::new(), processed: 0 }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(&mut self, event: E, at: SimTime) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::PastTime { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.payloads.insert(seq, event);
        Ok(EventId(seq))
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if self.payloads.remove(&id.0).is_some() {
            self.cancelled.insert(id.0);
            true
        } else {
            false
        }
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.skip_cancelled();
        self.heap.peek().map(|Reverse((t, _))| *t)
    }

    fn skip_cancelled(&mut self) {
        while let Some(Reverse((_, seq))) = self.heap.peek() {
            if self.cancelled.remove(seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Pops the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(SimTime, EventId, E)> {
        self.skip_cancelled();
        let Reverse((t, seq)) = self.heap.pop()?;
        let ev = self.payloads.remove(&seq).expect("live heap entry has a payload");
        debug_assert!(t >= self.now);
        self.now = t;
        self.processed += 1;
        Some((t, EventId(seq), ev))
    }

    /// Moves the clock forward without an event (used by `run_until(time)`).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delay_fires_next() {
        let mut q = EventQueue::new();
        q.schedule("a", 0).unwrap();
        assert_eq!(q.pop().map(|(t, _, e)| (t, e)), Some((0, "a")));
    }

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule("late", 9).unwrap();
        q.schedule("a", 5).unwrap();
        q.schedule("b", 5).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, _, e)| e)).collect();
        assert_eq!(order, vec!["a", "b", "late"]);
    }

    #[test]
    fn cancelled_event_never_fires() {
        let mut q = EventQueue::new();
        let id = q.schedule(1, 10).unwrap();
        q.schedule(2, 20).unwrap();
        assert!(q.cancel(id));
        assert!(!q.cancel(id));
        assert_eq!(q.pop().map(|(_, _, e)| e), Some(2));
        assert!(q.pop().is_none());
    }

    #[test]
    fn past_time_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule((), 10).unwrap();
        q.pop();
        assert!(matches!(q.schedule((), 9), Err(SimError::PastTime { .. })));
    }
}
