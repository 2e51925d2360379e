//! Deterministic stand-ins for kernel computation and copy payloads.
//!
//! A kernel's effect mixes a digest of everything it reads into every word
//! of everything it writes, so any divergence in inputs, ordering or
//! coverage shows up as a byte difference in the final state.

use super::memory::{BufferHandle, Device, HostMemory};
use super::SimError;
use crate::api::ApiCall;

const K0: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(K0);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn digest_bytes(data: &[u8]) -> u64 {
    let mut h = mix(data.len() as u64);
    let mut words = data.chunks_exact(8);
    for w in &mut words {
        h = mix(h ^ u64::from_le_bytes(w.try_into().unwrap()));
    }
    let rem = words.remainder();
    if !rem.is_empty() {
        let mut last = [0u8; 8];
        last[..rem.len()].copy_from_slice(rem);
        h = mix(h ^ u64::from_le_bytes(last) ^ 0xFF);
    }
    h
}

fn name_key(name: Option<&str>) -> u64 {
    name.map_or(0, |n| digest_bytes(n.as_bytes()))
}

/// Applies a kernel's effect to its true write set.
pub fn apply_kernel(dev: &mut Device, call: &ApiCall) -> Result<(), SimError> {
    let mut key = mix(call.seq ^ name_key(call.kernel_name.as_deref()));
    for &r in &call.true_reads {
        key = mix(key ^ dev.active(BufferHandle(r))?.digest());
    }
    for &w in &call.true_writes {
        let buf = dev.active_mut(BufferHandle(w))?;
        transform(buf.bytes_mut(), mix(key ^ u64::from(w)));
    }
    Ok(())
}

fn transform(data: &mut [u8], key: u64) {
    let mut words = data.chunks_exact_mut(8);
    for (i, w) in (&mut words).enumerate() {
        let v = u64::from_le_bytes((*w).try_into().unwrap());
        w.copy_from_slice(&mix(v ^ key ^ i as u64).to_le_bytes());
    }
    let rem = words.into_remainder();
    let tail = mix(key ^ 0xA5A5);
    for (i, b) in rem.iter_mut().enumerate() {
        *b ^= (tail >> (8 * i)) as u8;
    }
}

/// Bytes an application writes into host memory before a host-to-device copy.
pub fn h2d_payload(seq: u64, len: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(len as usize + 8);
    let mut i = 0u64;
    while (out.len() as u64) < len {
        out.extend_from_slice(&mix(seq.wrapping_mul(K0) ^ i).to_le_bytes());
        i += 1;
    }
    out.truncate(len as usize);
    out
}

pub fn copy_d2h(dev: &Device, host: &mut HostMemory, src: BufferHandle, off: u64, len: u64, host_addr: u64) -> Result<(), SimError> {
    let b = dev.active(src)?;
    check_range(b.size, off, len)?;
    host.write(host_addr, &b.bytes()[off as usize..(off + len) as usize]);
    Ok(())
}

pub fn copy_h2d(dev: &mut Device, dst: BufferHandle, off: u64, data: &[u8]) -> Result<(), SimError> {
    let b = dev.active_mut(dst)?;
    check_range(b.size, off, data.len() as u64)?;
    b.write_at(off, data);
    Ok(())
}

pub fn copy_d2d(dev: &mut Device, src: BufferHandle, src_off: u64, dst: BufferHandle, dst_off: u64, len: u64) -> Result<(), SimError> {
    let s = dev.active(src)?;
    check_range(s.size, src_off, len)?;
    let tmp = s.bytes()[src_off as usize..(src_off + len) as usize].to_vec();
    copy_h2d(dev, dst, dst_off, &tmp)
}

fn check_range(size: u64, off: u64, len: u64) -> Result<(), SimError> {
    if len == 0 || off.checked_add(len).is_none_or(|end| end > size) {
        return Err(SimError::InvalidLocator(format!("range {off}+{len} outside buffer of {size} bytes")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::ApiKind;

    fn launch(seq: u64, reads: Vec<u32>, writes: Vec<u32>) -> ApiCall {
        ApiCall {
            seq,
            kind: ApiKind::LaunchOpaque,
            kernel_name: Some("k".into()),
            true_reads: reads,
            true_writes: writes,
            ..ApiCall::default()
        }
    }

    #[test]
    fn effect_depends_on_inputs_and_order() {
        let mut d = Device::new(1 << 20, 4096);
        let a = d.alloc(100).unwrap();
        let b = d.alloc(100).unwrap();
        let mut d2 = d.clone();
        apply_kernel(&mut d, &launch(0, vec![a.0], vec![b.0])).unwrap();
        apply_kernel(&mut d, &launch(1, vec![b.0], vec![a.0])).unwrap();
        apply_kernel(&mut d2, &launch(1, vec![b.0], vec![a.0])).unwrap();
        apply_kernel(&mut d2, &launch(0, vec![a.0], vec![b.0])).unwrap();
        assert_ne!(d.get(a).unwrap().bytes(), d2.get(a).unwrap().bytes());
    }

    #[test]
    fn freed_buffer_access_is_use_after_free() {
        let mut d = Device::new(1 << 20, 4096);
        let a = d.alloc(64).unwrap();
        d.free(a).unwrap();
        assert!(matches!(apply_kernel(&mut d, &launch(0, vec![a.0], vec![])), Err(SimError::UseAfterFree(_))));
    }

    #[test]
    fn payload_is_deterministic_and_seq_keyed() {
        assert_eq!(h2d_payload(3, 77), h2d_payload(3, 77));
        assert_ne!(h2d_payload(3, 77), h2d_payload(4, 77));
        assert_eq!(h2d_payload(3, 77).len(), 77);
    }

    #[test]
    fn digest_sees_tail_bytes() {
        assert_ne!(digest_bytes(&[0; 9]), digest_bytes(&[0, 0, 0, 0, 0, 0, 0, 0, 1]));
        assert_ne!(digest_bytes(&[0; 8]), digest_bytes(&[0; 9]));
    }
}
