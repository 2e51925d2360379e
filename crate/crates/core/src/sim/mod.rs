//! Discrete-event model of one GPU: per-stream compute, bandwidth-limited
//! copy/checksum/network channels, device buffers and host pages.

mod clock;
pub mod effects;
mod link;
mod machine;
mod memory;

use thiserror::Error;

pub use clock::{EventId, EventQueue, SimTime};
pub use link::{Channel, ChunkDone, JobId, Link, Priority};
pub use machine::{Locator, Machine, Notice, OpId, Until, Work};
pub use memory::{BufferHandle, BufferStatus, ChunkState, Device, GpuBuffer, HostMemory, Page, StreamId, Upstream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {at} ns, before now ({now} ns)")]
    PastTime { at: u64, now: u64 },
    #[error("event cap of {0} exceeded")]
    Livelock(u64),
    #[error("out of device memory: requested {requested} bytes, {free} free")]
    OutOfDeviceMemory { requested: u64, free: u64 },
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("invalid locator: {0}")]
    InvalidLocator(String),
    #[error("buffer {0:?} used after free")]
    UseAfterFree(BufferHandle),
    #[error("unknown buffer {0:?}")]
    UnknownBuffer(BufferHandle),
    #[error("unknown stream {0:?}")]
    UnknownStream(StreamId),
    #[error("stream {0:?} still has queued work")]
    StreamBusy(StreamId),
}
