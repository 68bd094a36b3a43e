//! Device/emulator fidelity checks: execution-trace comparison and
//! content hashes of stack snapshots.

use alloc::string::String;
use alloc::vec::Vec;
use sha1::{Digest, Sha1};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSource {
    Device,
    Emulator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub source: TraceSource,
    pub pcs: Vec<u32>,
    /// Index range `[enter, exit)` of the function of interest.
    pub window: Option<(usize, usize)>,
}

impl TraceRecord {
    pub fn new(source: TraceSource, pcs: Vec<u32>) -> Self {
        TraceRecord { source, pcs, window: None }
    }

    /// The function-of-interest window, or the whole trace without markers.
    pub fn focus(&self) -> &[u32] {
        match self.window {
            Some((a, b)) => &self.pcs[a..b],
            None => &self.pcs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceComparison {
    pub equal: bool,
    /// Length of the longest common prefix.
    pub lcp: usize,
    /// First pc of `a` that differs from `b`; absent when one trace is a
    /// prefix of the other.
    pub divergence_pc: Option<u32>,
}

pub fn compare_traces(a: &[u32], b: &[u32]) -> TraceComparison {
    let lcp = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let divergence_pc = (lcp < a.len() && lcp < b.len()).then(|| a[lcp]);
    TraceComparison { equal: a == b, lcp, divergence_pc }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySnapshot {
    pub start: u32,
    pub bytes: Vec<u8>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FidelityError {
    #[error("memory snapshot is empty")]
    EmptyRegion,
}

/// Full SHA-1 of `bytes` as 40 lowercase hex digits.
pub fn sha1_hex(bytes: &[u8]) -> String {
    let digest = Sha1::digest(bytes);
    let mut s = String::with_capacity(40);
    for b in digest {
        s.push(char::from_digit((b >> 4) as u32, 16).unwrap());
        s.push(char::from_digit((b & 0xF) as u32, 16).unwrap());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackHash {
    pub full: String,
}

impl StackHash {
    /// Last 8 hex digits, the form used in fidelity reports.
    pub fn short(&self) -> &str {
        &self.full[self.full.len() - 8..]
    }
}

/// Content hash of a snapshot; the start address is deliberately ignored.
pub fn stack_hash(snap: &MemorySnapshot) -> Result<StackHash, FidelityError> {
    if snap.bytes.is_empty() {
        return Err(FidelityError::EmptyRegion);
    }
    Ok(StackHash { full: sha1_hex(&snap.bytes) })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryComparison {
    pub hash_a: StackHash,
    pub hash_b: StackHash,
    pub equal: bool,
    /// Offset of the first differing byte (or the shorter length).
    pub first_difference: Option<usize>,
}

pub fn compare_memory(a: &MemorySnapshot, b: &MemorySnapshot) -> Result<MemoryComparison, FidelityError> {
    let hash_a = stack_hash(a)?;
    let hash_b = stack_hash(b)?;
    let first_difference = a
        .bytes
        .iter()
        .zip(&b.bytes)
        .position(|(x, y)| x != y)
        .or_else(|| (a.bytes.len() != b.bytes.len()).then(|| a.bytes.len().min(b.bytes.len())));
    Ok(MemoryComparison { equal: hash_a == hash_b, hash_a, hash_b, first_difference })
}
