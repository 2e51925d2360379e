use crate::sim::SimTime;

/// Pre-created execution contexts handed out at restore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPool {
    free: usize,
    creation_ns: SimTime,
    acquired: usize,
}

impl ContextPool {
    pub fn new(size: usize, creation_ns: SimTime) -> Self {
        Self { free: size, creation_ns, acquired: 0 }
    }

    pub fn free(&self) -> usize {
        self.free
    }

    pub fn acquired(&self) -> usize {
        self.acquired
    }

    /// Latency charged before the context is usable.
    pub fn acquire(&mut self) -> SimTime {
        self.acquired += 1;
        if self.free > 0 {
            self.free -= 1;
            0
        } else {
            self.creation_ns
        }
    }

    /// Returns a context. A freshly created one joins the pool too.
    pub fn release(&mut self) {
        if self.acquired > 0 {
            self.acquired -= 1;
            self.free += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_acquire_is_free() {
        let mut p = ContextPool::new(1, 2_000_000_000);
        assert_eq!(p.acquire(), 0);
    }

    #[test]
    fn empty_pool_charges_creation() {
        let mut p = ContextPool::new(0, 2_000_000_000);
        assert_eq!(p.acquire(), 2_000_000_000);
    }

    #[test]
    fn release_refills() {
        let mut p = ContextPool::new(1, 7);
        assert_eq!(p.acquire(), 0);
        assert_eq!(p.acquire(), 7);
        p.release();
        assert_eq!(p.acquire(), 0);
        assert_eq!((p.free(), p.acquired()), (0, 2));
    }
}
