//! Checkpoint image codec.
//!
//! Layout (little-endian):
//!
//! ```text
//! header  "POSI" | u16 version | u16 flags | u32 page_size | u32 next_handle | u64 next_addr
//! u64 len | host pages   (u64 page index, page_size bytes)*
//! u64 len | gpu records  (u32 handle, u8 kind, payload)*
//! u64 len | dag          KDAG bytes, or nothing for an empty DAG
//! u64 len | meta         u64 cursor, (u8 tag, fields)*
//! ```
//!
//! `docs/image-format.md` has the full byte table.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::config::{DEVICE_ADDR_BASE, DEVICE_ALIGN};
use crate::dag::{KernelDag, Node, NodeId};
use crate::sim::BufferHandle;
use crate::wire::{Reader, WireError, Writer};

pub const IMAGE_MAGIC: &[u8; 4] = b"POSI";
pub const IMAGE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 24;
/// Header, four section lengths and the cursor.
pub const EMPTY_IMAGE_BYTES: usize = HEADER_BYTES + 4 * 8 + 8;

const GPU_INLINE: u8 = 0;
const GPU_DEDUP: u8 = 1;
const GPU_RECOMPUTE: u8 = 2;
const META_STREAM: u8 = 1;
const META_ALLOC: u8 = 2;

pub fn crc32(data: &[u8]) -> u32 {
    crc32fast::hash(data)
}

/// Which protocol produced an image. Stored in the header flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageKind {
    #[default]
    StopTheWorld = 0,
    Cow = 1,
    DirtyBit = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GpuRecord {
    Inline(Vec<u8>),
    DedupRef {
        host_addr: u64,
        len: u64,
        crc: u32,
    },
    /// Produced by replaying the listed retained DAG kernels onto zeroed memory.
    Recompute(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRecord {
    pub handle: BufferHandle,
    pub base: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointImage {
    pub kind: ImageKind,
    pub page_size: u32,
    pub next_handle: u32,
    pub next_addr: u64,
    pub host_pages: BTreeMap<u64, Vec<u8>>,
    pub gpu: BTreeMap<BufferHandle, GpuRecord>,
    pub dag: KernelDag,
    /// Trace seq of the last call admitted before the image's state.
    pub cursor: Option<u64>,
    pub streams: Vec<u32>,
    pub allocs: Vec<AllocRecord>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("corrupt image at byte {offset}: {reason}")]
    CorruptImage { offset: usize, reason: String },
    #[error("image invariant violated: {0}")]
    InvariantViolation(String),
}

impl From<WireError> for ImageError {
    fn from(e: WireError) -> Self {
        ImageError::CorruptImage { offset: e.offset, reason: e.reason }
    }
}

/// Per-section byte counts of an encoded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SectionSizes {
    pub host: u64,
    pub gpu: u64,
    pub dag: u64,
    pub meta: u64,
    pub total: u64,
}

impl CheckpointImage {
    pub fn new(page_size: u32) -> Self {
        Self { page_size, next_addr: DEVICE_ADDR_BASE, ..Default::default() }
    }

    pub fn alloc(&self, h: BufferHandle) -> Option<&AllocRecord> {
        self.allocs.iter().find(|a| a.handle == h)
    }

    /// Reads host bytes out of the page section; missing pages read as zero.
    pub fn host_read(&self, addr: u64, len: u64) -> Vec<u8> {
        let ps = self.page_size as u64;
        let mut out = vec![0u8; len as usize];
        let mut done = 0usize;
        while done < out.len() {
            let a = addr + done as u64;
            let off = (a % ps) as usize;
            let n = (ps as usize - off).min(out.len() - done);
            if let Some(p) = self.host_pages.get(&(a / ps)) {
                out[done..done + n].copy_from_slice(&p[off..off + n]);
            }
            done += n;
        }
        out
    }

    /// Bytes of buffer contents stored inline.
    pub fn inline_bytes(&self) -> u64 {
        self.gpu
            .values()
            .map(|r| match r {
                GpuRecord::Inline(b) => b.len() as u64,
                _ => 0,
            })
            .sum()
    }

    /// Buffer bytes covered by dedup references.
    pub fn dedup_bytes(&self) -> u64 {
        self.gpu
            .values()
            .map(|r| match r {
                GpuRecord::DedupRef { len, .. } => *len,
                _ => 0,
            })
            .sum()
    }

    pub fn check(&self) -> Result<(), String> {
        let ps = self.page_size as u64;
        if ps == 0 {
            return Err("page size is zero".into());
        }
        for (idx, p) in &self.host_pages {
            if p.len() as u64 != ps {
                return Err(format!("host page {idx} has {} bytes", p.len()));
            }
            if idx.checked_add(1).and_then(|e| e.checked_mul(ps)).is_none_or(|e| e > DEVICE_ADDR_BASE) {
                return Err(format!("host page {idx} above the host address range"));
            }
        }
        let mut prev_end = DEVICE_ADDR_BASE;
        let mut sorted = self.allocs.clone();
        sorted.sort_by_key(|a| a.base);
        for a in &sorted {
            if a.size == 0 || a.base < prev_end || a.base % DEVICE_ALIGN != 0 {
                return Err(format!("allocation {} at {:#x} is misplaced", a.handle.0, a.base));
            }
            prev_end = a.base.checked_add(a.size).ok_or("allocation overflows")?;
            if prev_end > self.next_addr || a.handle.0 >= self.next_handle {
                return Err(format!("allocation {} beyond the allocator cursor", a.handle.0));
            }
        }
        if self.allocs.windows(2).any(|w| w[0].handle >= w[1].handle) {
            return Err("allocations not in ascending handle order".into());
        }
        if self.streams.windows(2).any(|w| w[0] >= w[1]) {
            return Err("streams not in ascending order".into());
        }
        let handles: BTreeSet<BufferHandle> = self.allocs.iter().map(|a| a.handle).collect();
        if handles != self.gpu.keys().copied().collect() {
            return Err("gpu records do not match the allocation table".into());
        }
        for (h, rec) in &self.gpu {
            let size = self.alloc(*h).unwrap().size;
            match rec {
                GpuRecord::Inline(b) if b.len() as u64 != size => {
                    return Err(format!("inline record {} has {} of {size} bytes", h.0, b.len()));
                }
                GpuRecord::DedupRef { host_addr, len, crc } => {
                    if *len != size {
                        return Err(format!("dedup record {} covers {len} of {size} bytes", h.0));
                    }
                    let end = host_addr.checked_add(*len).ok_or("dedup range overflows")?;
                    if end > DEVICE_ADDR_BASE {
                        return Err(format!("dedup record {} points above host memory", h.0));
                    }
                    if let Some(missing) = (host_addr / ps..end.div_ceil(ps)).find(|i| !self.host_pages.contains_key(i)) {
                        return Err(format!("dedup record {} references missing page {missing}", h.0));
                    }
                    if crc32(&self.host_read(*host_addr, *len)) != *crc {
                        return Err(format!("dedup record {} CRC mismatch", h.0));
                    }
                }
                GpuRecord::Recompute(ids) => {
                    for id in ids {
                        if !matches!(self.dag.node(NodeId(*id)), Some(Node::Kernel(_))) {
                            return Err(format!("recompute record {} names missing kernel {id}", h.0));
                        }
                    }
                }
                _ => {}
            }
        }
        for (_, k) in self.dag.kernels() {
            if let Some(b) = k.reads.iter().chain(&k.writes).find(|b| !handles.contains(b)) {
                return Err(format!("DAG references unallocated buffer {}", b.0));
            }
        }
        Ok(())
    }

    pub fn section_sizes(&self) -> SectionSizes {
        let bytes = write_image(self).unwrap_or_default();
        let mut r = Reader::new(&bytes);
        let mut s = SectionSizes { total: bytes.len() as u64, ..Default::default() };
        if r.bytes(HEADER_BYTES).is_ok() {
            for slot in [&mut s.host, &mut s.gpu, &mut s.dag, &mut s.meta] {
                let len = r.u64().unwrap_or(0);
                *slot = len;
                let _ = r.bytes(len as usize);
            }
        }
        s
    }
}

pub fn write_image(img: &CheckpointImage) -> Result<Vec<u8>, ImageError> {
    img.check().map_err(ImageError::InvariantViolation)?;
    let mut w = Writer::default();
    w.bytes(IMAGE_MAGIC);
    w.u16(IMAGE_VERSION);
    w.u16(img.kind as u16);
    w.u32(img.page_size);
    w.u32(img.next_handle);
    w.u64(img.next_addr);
    w.prefixed_u64(|w| {
        for (idx, p) in &img.host_pages {
            w.u64(*idx);
            w.bytes(p);
        }
    });
    w.prefixed_u64(|w| {
        for (h, rec) in &img.gpu {
            w.u32(h.0);
            match rec {
                GpuRecord::Inline(b) => {
                    w.u8(GPU_INLINE);
                    w.u64(b.len() as u64);
                    w.bytes(b);
                }
                GpuRecord::DedupRef { host_addr, len, crc } => {
                    w.u8(GPU_DEDUP);
                    w.u64(*host_addr);
                    w.u64(*len);
                    w.u32(*crc);
                }
                GpuRecord::Recompute(ids) => {
                    w.u8(GPU_RECOMPUTE);
                    w.u32(ids.len() as u32);
                    for id in ids {
                        w.u64(*id);
                    }
                }
            }
        }
    });
    w.prefixed_u64(|w| {
        if img.dag.node_count() > 0 {
            w.bytes(&img.dag.serialize());
        }
    });
    w.prefixed_u64(|w| {
        w.u64(img.cursor.unwrap_or(u64::MAX));
        for s in &img.streams {
            w.u8(META_STREAM);
            w.u32(*s);
        }
        for a in &img.allocs {
            w.u8(META_ALLOC);
            w.u32(a.handle.0);
            w.u64(a.base);
            w.u64(a.size);
        }
    });
    Ok(w.buf)
}

pub fn read_image(bytes: &[u8]) -> Result<CheckpointImage, ImageError> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != IMAGE_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = r.u16()?;
    if version != IMAGE_VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let kind = match r.u16()? {
        0 => ImageKind::StopTheWorld,
        1 => ImageKind::Cow,
        2 => ImageKind::DirtyBit,
        f => return Err(corrupt(6, format!("unknown flags {f:#x}"))),
    };
    let page_size = r.u32()?;
    if page_size == 0 {
        return Err(corrupt(8, "zero page size"));
    }
    let mut img = CheckpointImage { kind, page_size, next_handle: r.u32()?, next_addr: r.u64()?, ..Default::default() };

    let mut sec = section(&mut r)?;
    while !sec.is_empty() {
        let at = sec.offset();
        let idx = sec.u64()?;
        let data = sec.bytes(page_size as usize)?.to_vec();
        if img.host_pages.last_key_value().is_some_and(|(k, _)| *k >= idx) {
            return Err(corrupt(at, "host pages out of order"));
        }
        img.host_pages.insert(idx, data);
    }

    let mut sec = section(&mut r)?;
    while !sec.is_empty() {
        let at = sec.offset();
        let h = BufferHandle(sec.u32()?);
        if img.gpu.last_key_value().is_some_and(|(k, _)| *k >= h) {
            return Err(corrupt(at, "gpu records out of order"));
        }
        let rec = match sec.u8()? {
            GPU_INLINE => {
                let n = sec.u64()?;
                let n = sec.checked_len(n, 1)?;
                GpuRecord::Inline(sec.bytes(n)?.to_vec())
            }
            GPU_DEDUP => GpuRecord::DedupRef { host_addr: sec.u64()?, len: sec.u64()?, crc: sec.u32()? },
            GPU_RECOMPUTE => {
                let n = sec.u32()? as u64;
                sec.checked_len(n, 8)?;
                GpuRecord::Recompute((0..n).map(|_| sec.u64()).collect::<Result<_, _>>()?)
            }
            k => return Err(corrupt(at + 4, format!("unknown gpu record kind {k}"))),
        };
        img.gpu.insert(h, rec);
    }

    let sec = section(&mut r)?;
    let dag_at = sec.offset();
    if !sec.is_empty() {
        let raw = &bytes[dag_at..dag_at + sec.remaining()];
        img.dag = KernelDag::deserialize(raw).map_err(|e| match e {
            crate::dag::DagError::CorruptDag { offset, reason } => corrupt(dag_at + offset, format!("dag: {reason}")),
            other => corrupt(dag_at, other.to_string()),
        })?;
        if img.dag.node_count() == 0 {
            return Err(corrupt(dag_at, "empty DAG must be encoded as an empty section"));
        }
    }

    let mut sec = section(&mut r)?;
    let cursor = sec.u64()?;
    img.cursor = (cursor != u64::MAX).then_some(cursor);
    while !sec.is_empty() {
        let at = sec.offset();
        match sec.u8()? {
            META_STREAM => img.streams.push(sec.u32()?),
            META_ALLOC => {
                if img.allocs.len() + 1 > img.next_handle as usize {
                    return Err(corrupt(at, "more allocations than handles"));
                }
                img.allocs.push(AllocRecord { handle: BufferHandle(sec.u32()?), base: sec.u64()?, size: sec.u64()? })
            }
            t => return Err(corrupt(at, format!("unknown meta tag {t}"))),
        }
    }
    if !r.is_empty() {
        return Err(corrupt(r.offset(), "trailing bytes"));
    }
    img.check().map_err(|reason| corrupt(0, reason))?;
    Ok(img)
}

fn section<'a>(r: &mut Reader<'a>) -> Result<Reader<'a>, ImageError> {
    let len = r.u64()?;
    let n = r.checked_len(len, 1)?;
    Ok(r.section(n)?)
}

fn corrupt(offset: usize, reason: impl Into<String>) -> ImageError {
    ImageError::CorruptImage { offset, reason: reason.into() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::{ApiCall, ApiKind};
    use crate::sim::Device;
    use std::sync::Arc;

    fn sample() -> CheckpointImage {
        let mut img = CheckpointImage::new(64);
        img.next_handle = 3;
        img.next_addr = DEVICE_ADDR_BASE + 0x300;
        let page: Vec<u8> = (0..64).collect();
        img.host_pages.insert(2, page.clone());
        img.allocs = vec![
            AllocRecord { handle: BufferHandle(0), base: DEVICE_ADDR_BASE, size: 16 },
            AllocRecord { handle: BufferHandle(2), base: DEVICE_ADDR_BASE + 0x200, size: 64 },
        ];
        img.gpu.insert(BufferHandle(0), GpuRecord::Inline(vec![7; 16]));
        img.gpu.insert(BufferHandle(2), GpuRecord::DedupRef { host_addr: 128, len: 64, crc: crc32(&page) });
        img.streams = vec![0, 3];
        img.cursor = Some(41);
        img
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn empty_image_is_64_bytes() {
        let img = CheckpointImage::new(4096);
        let bytes = write_image(&img).unwrap();
        assert_eq!(bytes.len(), 64);
        assert_eq!(read_image(&bytes).unwrap(), img);
    }

    #[test]
    fn round_trip_is_canonical() {
        let img = sample();
        let a = write_image(&img).unwrap();
        let back = read_image(&a).unwrap();
        assert_eq!(back, img);
        assert_eq!(write_image(&back).unwrap(), a);
    }

    #[test]
    fn dedup_record_excludes_buffer_bytes() {
        let img = sample();
        let inline_size = {
            let mut i = img.clone();
            i.gpu.insert(BufferHandle(2), GpuRecord::Inline(vec![0; 64]));
            write_image(&i).unwrap().len()
        };
        // An inline record costs 13 + len bytes, a dedup record 25.
        assert_eq!(inline_size - write_image(&img).unwrap().len(), 13 + 64 - 25);
    }

    #[test]
    fn flipped_crc_and_bad_version_are_rejected() {
        let bytes = write_image(&sample()).unwrap();
        let crc_at = bytes.len() - 8 - (1 + 4) * 2 - (1 + 4 + 16) * 2 - 8 - 8 - 4;
        let mut bad = bytes.clone();
        bad[crc_at] ^= 1;
        assert!(matches!(read_image(&bad), Err(ImageError::CorruptImage { .. })), "byte {crc_at}");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = read_image(&v2).unwrap_err();
        assert_eq!(err, ImageError::CorruptImage { offset: 4, reason: "unsupported version 2".into() });
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = write_image(&sample()).unwrap();
        for cut in 0..bytes.len() {
            assert!(read_image(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(read_image(&long).is_err());
    }

    #[test]
    fn writer_refuses_dangling_recompute() {
        let mut img = sample();
        img.gpu.insert(BufferHandle(0), GpuRecord::Recompute(vec![9]));
        assert!(matches!(write_image(&img), Err(ImageError::InvariantViolation(_))));
    }

    #[test]
    fn dag_section_round_trips() {
        let mut d = Device::new(1 << 20, 64);
        let h = d.alloc(16).unwrap();
        let mut img = sample();
        let call = ApiCall { seq: 5, kind: ApiKind::LaunchKnown, ..Default::default() };
        let k = img.dag.add_kernel(Arc::new(call), &[h].into(), &[h].into(), &d).unwrap();
        img.gpu.insert(h, GpuRecord::Recompute(vec![k.0]));
        let bytes = write_image(&img).unwrap();
        assert_eq!(read_image(&bytes).unwrap(), img);
        assert_eq!(img.section_sizes().dag, img.dag.serialize().len() as u64);
    }
}
