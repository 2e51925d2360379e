//! Sequential reference execution: every call runs to completion in trace
//! order on a plain device, with no timing and no C/R machinery.

use crate::api::{ApiCall, ApiKind};
use crate::config::Config;
use crate::process::StateSnapshot;
use crate::sim::effects::{apply_kernel, copy_d2d, copy_d2h, copy_h2d, h2d_payload};
use crate::sim::{BufferHandle, Device, HostMemory, SimError};

pub struct Reference {
    pub dev: Device,
    pub host: HostMemory,
}

impl Reference {
    pub fn new(cfg: &Config) -> Self {
        Self { dev: Device::new(cfg.device_capacity, cfg.chunk_size), host: HostMemory::new(cfg.page_size) }
    }

    fn at(&self, addr: u64) -> Result<(BufferHandle, u64), SimError> {
        let h = self.dev.lookup(addr).ok_or_else(|| SimError::InvalidLocator(format!("{addr:#x}")))?;
        Ok((h, addr - self.dev.get(h).unwrap().base))
    }

    pub fn apply(&mut self, c: &ApiCall) -> Result<(), SimError> {
        match c.kind {
            ApiKind::Malloc => {
                self.dev.alloc(c.bytes)?;
            }
            ApiKind::Free => {
                let (h, _) = self.at(c.args.first().map_or(0, |a| a.v))?;
                self.dev.free(h)?;
            }
            ApiKind::MemcpyH2D => {
                let (dst, src, n) = c.copy_args().unwrap();
                let data = h2d_payload(c.seq, n);
                self.host.write(src, &data);
                let (h, off) = self.at(dst)?;
                copy_h2d(&mut self.dev, h, off, &data)?;
            }
            ApiKind::MemcpyD2H => {
                let (dst, src, n) = c.copy_args().unwrap();
                let (h, off) = self.at(src)?;
                copy_d2h(&self.dev, &mut self.host, h, off, n, dst)?;
            }
            ApiKind::MemcpyD2D => {
                let (dst, src, n) = c.copy_args().unwrap();
                let (s, so) = self.at(src)?;
                let (d, dof) = self.at(dst)?;
                copy_d2d(&mut self.dev, s, so, d, dof, n)?;
            }
            ApiKind::LaunchKnown | ApiKind::LaunchOpaque => apply_kernel(&mut self.dev, c)?,
            _ => {}
        }
        Ok(())
    }

    pub fn state(&self) -> StateSnapshot {
        StateSnapshot::capture(&self.dev, &self.host)
    }
}

/// State after the calls with seq `..=cursor` (or none), and the final state.
pub fn reference_states(cfg: &Config, trace: &[ApiCall], cursor: Option<u64>) -> Result<(StateSnapshot, StateSnapshot), SimError> {
    let mut r = Reference::new(cfg);
    let split = cursor.map_or(0, |c| c as usize + 1).min(trace.len());
    for c in &trace[..split] {
        r.apply(c)?;
    }
    let mid = r.state();
    for c in &trace[split..] {
        r.apply(c)?;
    }
    Ok((mid, r.state()))
}

pub fn reference_final(cfg: &Config, trace: &[ApiCall]) -> Result<StateSnapshot, SimError> {
    reference_states(cfg, trace, None).map(|(_, f)| f)
}
