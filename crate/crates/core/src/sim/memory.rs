//! Device buffers and host pages.

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::config::{DEVICE_ADDR_BASE, DEVICE_ALIGN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BufferHandle(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkState {
    NotCopied,
    Copying,
    Copied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferStatus {
    Active,
    Freed,
}

/// Provenance of the last whole-buffer host-to-device copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Upstream {
    pub host_addr: u64,
    pub len: u64,
    pub crc: u32,
}

#[derive(Debug, Clone)]
pub struct GpuBuffer {
    pub handle: BufferHandle,
    pub base: u64,
    pub size: u64,
    data: Vec<u8>,
    pub chunks: Vec<ChunkState>,
    pub dirty: bool,
    pub cow_staged: Option<u64>,
    pub upstream: Option<Upstream>,
    pub status: BufferStatus,
    digest: Cell<Option<u64>>,
}

impl GpuBuffer {
    fn new(handle: BufferHandle, base: u64, size: u64, chunk: u64, backed: bool) -> Self {
        let n_chunks = size.div_ceil(chunk) as usize;
        Self {
            handle,
            base,
            size,
            data: if backed { vec![0; size as usize] } else { Vec::new() },
            chunks: vec![ChunkState::NotCopied; n_chunks],
            dirty: false,
            cow_staged: None,
            upstream: None,
            status: BufferStatus::Active,
            digest: Cell::new(None),
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == BufferStatus::Active
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.base + self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Mutable access to the contents; invalidates the cached digest.
    pub fn bytes_mut(&mut self) -> &mut [u8] {
        self.digest.set(None);
        &mut self.data
    }

    pub fn write_at(&mut self, offset: u64, src: &[u8]) {
        let o = offset as usize;
        self.bytes_mut()[o..o + src.len()].copy_from_slice(src);
    }

    /// Content digest, cached until the next mutation.
    pub fn digest(&self) -> u64 {
        if let Some(d) = self.digest.get() {
            return d;
        }
        let d = super::effects::digest_bytes(&self.data);
        self.digest.set(Some(d));
        d
    }

    pub fn all_chunks(&self, state: ChunkState) -> bool {
        self.chunks.iter().all(|c| *c == state)
    }

    pub fn set_chunks(&mut self, state: ChunkState) {
        self.chunks.iter_mut().for_each(|c| *c = state);
    }
}

/// Virtual GPU memory with a bump allocator (no address reuse).
#[derive(Debug, Clone)]
pub struct Device {
    buffers: Vec<GpuBuffer>,
    active: BTreeMap<u64, BufferHandle>,
    next_addr: u64,
    used: u64,
    capacity: u64,
    chunk: u64,
    backed: bool,
}

impl Device {
    pub fn new(capacity: u64, chunk: u64) -> Self {
        Self { buffers: Vec::new(), active: BTreeMap::new(), next_addr: DEVICE_ADDR_BASE, used: 0, capacity, chunk, backed: true }
    }

    /// A device that tracks allocations but stores no contents.
    pub fn unbacked(capacity: u64, chunk: u64) -> Self {
        Self { backed: false, ..Self::new(capacity, chunk) }
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunk
    }

    pub fn next_handle(&self) -> u32 {
        self.buffers.len() as u32
    }

    pub fn next_addr(&self) -> u64 {
        self.next_addr
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn alloc(&mut self, size: u64) -> Result<BufferHandle, SimError> {
        if size == 0 {
            return Err(SimError::ZeroSize);
        }
        if self.used + size > self.capacity {
            return Err(SimError::OutOfDeviceMemory { requested: size, free: self.capacity - self.used });
        }
        let handle = BufferHandle(self.buffers.len() as u32);
        let base = self.next_addr;
        self.next_addr = (base + size).next_multiple_of(DEVICE_ALIGN);
        self.used += size;
        self.buffers.push(GpuBuffer::new(handle, base, size, self.chunk, self.backed));
        self.active.insert(base, handle);
        Ok(handle)
    }

    /// Recreates an allocation at a fixed address (restore path).
    pub fn alloc_at(&mut self, handle: BufferHandle, base: u64, size: u64) -> Result<(), SimError> {
        if size == 0 || base < DEVICE_ADDR_BASE {
            return Err(SimError::InvalidLocator(format!("bad allocation {base:#x}+{size}")));
        }
        while self.buffers.len() <= handle.0 as usize {
            // Placeholder for a handle that was freed before the checkpoint.
            let h = BufferHandle(self.buffers.len() as u32);
            let mut b = GpuBuffer::new(h, 0, 0, self.chunk, false);
            b.status = BufferStatus::Freed;
            self.buffers.push(b);
        }
        if self.buffers[handle.0 as usize].is_active() {
            return Err(SimError::InvalidLocator(format!("handle {} allocated twice", handle.0)));
        }
        if let Some((_, h)) = self.active.range(..base + size).next_back() {
            let b = &self.buffers[h.0 as usize];
            if b.base + b.size > base {
                return Err(SimError::InvalidLocator(format!("allocation {base:#x} overlaps")));
            }
        }
        self.buffers[handle.0 as usize] = GpuBuffer::new(handle, base, size, self.chunk, self.backed);
        self.active.insert(base, handle);
        self.used += size;
        self.next_addr = self.next_addr.max((base + size).next_multiple_of(DEVICE_ALIGN));
        Ok(())
    }

    /// Pads the handle space and bump pointer to match a checkpointed device.
    pub fn set_next(&mut self, next_handle: u32, next_addr: u64) {
        while self.buffers.len() < next_handle as usize {
            let h = BufferHandle(self.buffers.len() as u32);
            let mut b = GpuBuffer::new(h, 0, 0, self.chunk, false);
            b.status = BufferStatus::Freed;
            self.buffers.push(b);
        }
        self.next_addr = self.next_addr.max(next_addr);
    }

    pub fn free(&mut self, h: BufferHandle) -> Result<(), SimError> {
        let b = self.buffers.get_mut(h.0 as usize).ok_or(SimError::UnknownBuffer(h))?;
        if !b.is_active() {
            return Err(SimError::UseAfterFree(h));
        }
        b.status = BufferStatus::Freed;
        b.data = Vec::new();
        b.digest.set(None);
        self.used -= b.size;
        self.active.remove(&b.base);
        Ok(())
    }

    pub fn get(&self, h: BufferHandle) -> Option<&GpuBuffer> {
        self.buffers.get(h.0 as usize)
    }

    pub fn get_mut(&mut self, h: BufferHandle) -> Option<&mut GpuBuffer> {
        self.buffers.get_mut(h.0 as usize)
    }

    pub fn active(&self, h: BufferHandle) -> Result<&GpuBuffer, SimError> {
        match self.get(h) {
            Some(b) if b.is_active() => Ok(b),
            Some(_) => Err(SimError::UseAfterFree(h)),
            None => Err(SimError::UnknownBuffer(h)),
        }
    }

    pub fn active_mut(&mut self, h: BufferHandle) -> Result<&mut GpuBuffer, SimError> {
        match self.buffers.get_mut(h.0 as usize) {
            Some(b) if b.is_active() => Ok(b),
            Some(_) => Err(SimError::UseAfterFree(h)),
            None => Err(SimError::UnknownBuffer(h)),
        }
    }

    /// Active buffer containing `addr`.
    pub fn lookup(&self, addr: u64) -> Option<BufferHandle> {
        let (_, h) = self.active.range(..=addr).next_back()?;
        self.buffers[h.0 as usize].contains(addr).then_some(*h)
    }

    /// Active buffers in handle order.
    pub fn active_handles(&self) -> Vec<BufferHandle> {
        self.buffers.iter().filter(|b| b.is_active()).map(|b| b.handle).collect()
    }

    pub fn iter_active(&self) -> impl Iterator<Item = &GpuBuffer> {
        self.buffers.iter().filter(|b| b.is_active())
    }

    pub fn iter_active_mut(&mut self) -> impl Iterator<Item = &mut GpuBuffer> {
        self.buffers.iter_mut().filter(|b| b.is_active())
    }

    /// Allocation table: (handle, base, size) of every Active buffer.
    pub fn allocation_table(&self) -> Vec<(BufferHandle, u64, u64)> {
        self.iter_active().map(|b| (b.handle, b.base, b.size)).collect()
    }

    /// Checks pairwise disjointness and the address-space split.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut prev_end = DEVICE_ADDR_BASE;
        for (base, h) in &self.active {
            let b = &self.buffers[h.0 as usize];
            if *base < prev_end {
                return Err(format!("buffer {} at {base:#x} overlaps", h.0));
            }
            if b.chunks.len() as u64 != b.size.div_ceil(self.chunk) {
                return Err(format!("buffer {} chunk count", h.0));
            }
            prev_end = base + b.size;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub data: Vec<u8>,
    pub hw_dirty: bool,
    /// Software-clearable dirty bit used by incremental CPU checkpointing.
    pub soft_dirty: bool,
}

#[derive(Debug, Clone)]
pub struct HostMemory {
    page_size: u64,
    pages: BTreeMap<u64, Page>,
}

impl HostMemory {
    pub fn new(page_size: u64) -> Self {
        Self { page_size, pages: BTreeMap::new() }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn page_range(&self, addr: u64, len: u64) -> std::ops::Range<u64> {
        if len == 0 {
            return 0..0;
        }
        addr / self.page_size..(addr + len).div_ceil(self.page_size)
    }

    pub fn write(&mut self, addr: u64, src: &[u8]) {
        assert!(addr + (src.len() as u64) <= crate::config::DEVICE_ADDR_BASE, "host write above host range");
        let ps = self.page_size;
        let mut done = 0usize;
        while done < src.len() {
            let a = addr + done as u64;
            let idx = a / ps;
            let off = (a % ps) as usize;
            let n = (ps as usize - off).min(src.len() - done);
            let page = self.pages.entry(idx).or_insert_with(|| Page { data: vec![0; ps as usize], hw_dirty: false, soft_dirty: false });
            page.data[off..off + n].copy_from_slice(&src[done..done + n]);
            page.hw_dirty = true;
            page.soft_dirty = true;
            done += n;
        }
    }

    pub fn read(&self, addr: u64, len: u64) -> Vec<u8> {
        let ps = self.page_size;
        let mut out = vec![0u8; len as usize];
        let mut done = 0usize;
        while done < out.len() {
            let a = addr + done as u64;
            let off = (a % ps) as usize;
            let n = (ps as usize - off).min(out.len() - done);
            if let Some(p) = self.pages.get(&(a / ps)) {
                out[done..done + n].copy_from_slice(&p.data[off..off + n]);
            }
            done += n;
        }
        out
    }

    pub fn page(&self, idx: u64) -> Option<&Page> {
        self.pages.get(&idx)
    }

    pub fn page_indices(&self) -> Vec<u64> {
        self.pages.keys().copied().collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.pages.len() as u64 * self.page_size
    }

    /// Installs page contents without touching dirty bits.
    pub fn install_page(&mut self, idx: u64, data: Vec<u8>) {
        assert_eq!(data.len() as u64, self.page_size);
        self.pages.insert(idx, Page { data, hw_dirty: false, soft_dirty: false });
    }

    pub fn clear_hw_dirty(&mut self, addr: u64, len: u64) {
        for idx in self.page_range(addr, len) {
            if let Some(p) = self.pages.get_mut(&idx) {
                p.hw_dirty = false;
            }
        }
    }

    /// True when no page in the range was written since its bit was cleared.
    pub fn hw_clean(&self, addr: u64, len: u64) -> bool {
        self.page_range(addr, len).all(|i| self.pages.get(&i).is_none_or(|p| !p.hw_dirty))
    }

    pub fn clear_soft_dirty(&mut self, idx: u64) {
        if let Some(p) = self.pages.get_mut(&idx) {
            p.soft_dirty = false;
        }
    }

    pub fn clear_all_soft_dirty(&mut self) {
        self.pages.values_mut().for_each(|p| p.soft_dirty = false);
    }

    pub fn soft_dirty_pages(&self) -> Vec<u64> {
        self.pages.iter().filter(|(_, p)| p.soft_dirty).map(|(i, _)| *i).collect()
    }

    pub fn snapshot(&self) -> BTreeMap<u64, Vec<u8>> {
        self.pages.iter().map(|(i, p)| (*i, p.data.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocations_are_disjoint_and_aligned() {
        let mut d = Device::new(1 << 20, 4096);
        let a = d.alloc(4096).unwrap();
        let b = d.alloc(4096).unwrap();
        let (ba, bb) = (d.get(a).unwrap().base, d.get(b).unwrap().base);
        assert_eq!(ba, DEVICE_ADDR_BASE);
        assert!(bb >= ba + 4096);
        assert_eq!(bb % DEVICE_ALIGN, 0);
        assert_eq!(d.lookup(ba + 4095), Some(a));
        assert_eq!(d.lookup(bb), Some(b));
        assert_eq!(d.lookup(ba - 1), None);
    }

    #[test]
    fn zero_and_oversized_allocations_fail() {
        let mut d = Device::new(8192, 4096);
        assert!(matches!(d.alloc(0), Err(SimError::ZeroSize)));
        d.alloc(8000).unwrap();
        assert!(matches!(d.alloc(500), Err(SimError::OutOfDeviceMemory { .. })));
    }

    #[test]
    fn gpt2_train_footprint_fits_80gb() {
        let mut d = Device::unbacked(80_000_000_000, 64 * 1024);
        let total: u64 = 30_800_000_000;
        let n = 1044u64;
        for i in 0..n {
            d.alloc(total / n + u64::from(i < total % n)).unwrap();
        }
        assert_eq!(d.used(), total);
        assert_eq!(d.active_handles().len(), 1044);
        d.check_invariants().unwrap();
    }

    #[test]
    fn freed_buffer_is_not_found() {
        let mut d = Device::new(1 << 20, 4096);
        let a = d.alloc(100).unwrap();
        let base = d.get(a).unwrap().base;
        d.free(a).unwrap();
        assert_eq!(d.lookup(base), None);
        assert!(matches!(d.free(a), Err(SimError::UseAfterFree(_))));
        // No address reuse.
        let b = d.alloc(100).unwrap();
        assert!(d.get(b).unwrap().base > base);
    }

    #[test]
    fn host_dirty_bits() {
        let mut h = HostMemory::new(4096);
        h.write(100, &[1, 2, 3]);
        assert!(!h.hw_clean(0, 4096));
        h.clear_hw_dirty(0, 4096);
        assert!(h.hw_clean(0, 4096));
        assert_eq!(h.read(99, 5), vec![0, 1, 2, 3, 0]);
        h.write(4095, &[9, 9]);
        assert_eq!(h.page_range(4095, 2), 0..2);
        assert!(!h.hw_clean(4096, 1));
        assert_eq!(h.soft_dirty_pages(), vec![0, 1]);
        h.clear_all_soft_dirty();
        assert!(h.soft_dirty_pages().is_empty());
        assert!(!h.hw_clean(0, 1));
    }
}
