//! Intercepted driver-API vocabulary, the static DAG rule table and the
//! JSON-lines trace format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ApiKind {
    Malloc,
    Free,
    MemcpyH2D,
    MemcpyD2H,
    MemcpyD2D,
    LaunchKnown,
    LaunchOpaque,
    StreamCreate,
    StreamDestroy,
    DeviceSynchronize,
    StreamSynchronize,
    #[default]
    GetDevice,
}

impl ApiKind {
    pub const ALL: [ApiKind; 12] = [
        ApiKind::Malloc,
        ApiKind::Free,
        ApiKind::MemcpyH2D,
        ApiKind::MemcpyD2H,
        ApiKind::MemcpyD2D,
        ApiKind::LaunchKnown,
        ApiKind::LaunchOpaque,
        ApiKind::StreamCreate,
        ApiKind::StreamDestroy,
        ApiKind::DeviceSynchronize,
        ApiKind::StreamSynchronize,
        ApiKind::GetDevice,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn is_launch(self) -> bool {
        matches!(self, ApiKind::LaunchKnown | ApiKind::LaunchOpaque)
    }

    pub fn is_memcpy(self) -> bool {
        matches!(self, ApiKind::MemcpyH2D | ApiKind::MemcpyD2H | ApiKind::MemcpyD2D)
    }
}

/// One raw launch argument: its value and declared size in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arg {
    pub v: u64,
    pub size: u32,
}

impl Arg {
    pub fn ptr(v: u64) -> Self {
        Self { v, size: 8 }
    }

    pub fn scalar(v: u64, size: u32) -> Self {
        Self { v, size }
    }
}

/// One intercepted API call.
///
/// Memcpy arguments are `[dst, src, count]`. `true_reads`/`true_writes` are
/// ground truth for the device model and the validator; speculation never
/// looks at them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiCall {
    pub seq: u64,
    pub kind: ApiKind,
    #[serde(default)]
    pub stream: Option<u32>,
    #[serde(default)]
    pub kernel_name: Option<String>,
    #[serde(default)]
    pub args: Vec<Arg>,
    #[serde(default)]
    pub bytes: u64,
    #[serde(default)]
    pub duration_ns: u64,
    #[serde(default)]
    pub true_reads: Vec<u32>,
    #[serde(default)]
    pub true_writes: Vec<u32>,
}

impl ApiCall {
    pub fn stream_id(&self) -> u32 {
        self.stream.unwrap_or(0)
    }

    /// Memcpy `(dst, src, count)`.
    pub fn copy_args(&self) -> Option<(u64, u64, u64)> {
        match self.args.as_slice() {
            [d, s, c, ..] if self.kind.is_memcpy() => Some((d.v, s.v, c.v)),
            _ => None,
        }
    }
}

/// Static rule applied to an intercepted call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagRule {
    Skip,
    /// No DAG node; updates the allocation table.
    Register,
    AddNode(Extractor),
    ClearDag(ClearScope),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extractor {
    MemoryMove,
    Declared,
    Speculative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClearScope {
    Device,
    Stream,
}

/// The rule table. Total over [`ApiKind`].
pub const fn rule_for(kind: ApiKind) -> DagRule {
    match kind {
        ApiKind::Malloc | ApiKind::Free => DagRule::Register,
        ApiKind::MemcpyH2D | ApiKind::MemcpyD2H | ApiKind::MemcpyD2D => DagRule::AddNode(Extractor::MemoryMove),
        ApiKind::LaunchKnown => DagRule::AddNode(Extractor::Declared),
        ApiKind::LaunchOpaque => DagRule::AddNode(Extractor::Speculative),
        ApiKind::DeviceSynchronize => DagRule::ClearDag(ClearScope::Device),
        ApiKind::StreamSynchronize => DagRule::ClearDag(ClearScope::Stream),
        ApiKind::StreamCreate | ApiKind::StreamDestroy | ApiKind::GetDevice => DagRule::Skip,
    }
}

/// Argument role in a known library signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    R,
    W,
    RW,
    /// Scalar; never a buffer.
    S,
}

use Role::{R, RW, S, W};

const KNOWN: &[(&str, &[Role])] = &[
    ("cublasSgemm", &[R, R, RW, S, S, S]),
    ("cublasSaxpy", &[R, RW, S]),
    ("cublasSscal", &[RW, S]),
    ("cudnnConvolutionForward", &[R, R, W, S]),
    ("cudnnSoftmaxForward", &[R, W, S]),
    ("ncclAllReduce", &[R, W, S]),
];

pub fn known_signature(name: &str) -> Option<&'static [Role]> {
    KNOWN.iter().find(|(n, _)| *n == name).map(|(_, r)| *r)
}

pub fn known_kernel_names() -> impl Iterator<Item = &'static str> {
    KNOWN.iter().map(|(n, _)| *n)
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace call {index} has seq {seq}; calls must be numbered 0, 1, 2, ...")]
    Sequence { index: usize, seq: u64 },
}

pub fn write_trace<W: Write>(mut out: W, calls: &[ApiCall]) -> Result<(), TraceError> {
    for c in calls {
        serde_json::to_writer(&mut out, c).map_err(|e| TraceError::Parse { line: c.seq as usize + 1, msg: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<ApiCall>, TraceError> {
    let mut calls = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let call: ApiCall = serde_json::from_str(&line).map_err(|e| TraceError::Parse { line: i + 1, msg: e.to_string() })?;
        if call.seq != calls.len() as u64 {
            return Err(TraceError::Sequence { index: calls.len(), seq: call.seq });
        }
        calls.push(call);
    }
    Ok(calls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_table_is_total() {
        for k in ApiKind::ALL {
            let _ = rule_for(k);
            assert_eq!(ApiKind::from_code(k.code()), Some(k));
        }
        assert_eq!(ApiKind::from_code(12), None);
    }

    #[test]
    fn rule_examples() {
        assert_eq!(rule_for(ApiKind::GetDevice), DagRule::Skip);
        assert_eq!(rule_for(ApiKind::Malloc), DagRule::Register);
        assert_eq!(rule_for(ApiKind::LaunchOpaque), DagRule::AddNode(Extractor::Speculative));
        assert_eq!(rule_for(ApiKind::StreamSynchronize), DagRule::ClearDag(ClearScope::Stream));
        assert_eq!(rule_for(ApiKind::DeviceSynchronize), DagRule::ClearDag(ClearScope::Device));
    }

    #[test]
    fn trace_round_trips_with_exact_field_names() {
        let calls = vec![
            ApiCall { seq: 0, kind: ApiKind::Malloc, bytes: 4096, ..Default::default() },
            ApiCall {
                seq: 1,
                kind: ApiKind::LaunchOpaque,
                stream: Some(1),
                kernel_name: Some("vec_add".into()),
                args: vec![Arg::ptr(0x7000_0000_0000), Arg::scalar(1024, 4)],
                duration_ns: 200,
                true_reads: vec![0],
                true_writes: vec![0],
                ..Default::default()
            },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &calls).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        for k in ["seq", "kind", "stream", "kernel_name", "args", "bytes", "duration_ns", "true_reads", "true_writes"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
        assert_eq!(first["args"][0]["v"], 0x7000_0000_0000u64);
        assert_eq!(read_trace(buf.as_slice()).unwrap(), calls);
    }

    #[test]
    fn out_of_order_seq_is_rejected() {
        let line = r#"{"seq": 3, "kind": "GetDevice"}"#;
        assert!(matches!(read_trace(line.as_bytes()), Err(TraceError::Sequence { .. })));
        assert!(matches!(read_trace("{".as_bytes()), Err(TraceError::Parse { .. })));
    }
}
