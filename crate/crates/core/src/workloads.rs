//! Demo computations in wrapper form.
//!
//! ```
//! use softdr::replication::run_direct;
//! use softdr::workloads::WorkloadId;
//!
//! let w: WorkloadId = "checksum:64".parse().unwrap();
//! let out = run_direct(&w, &w.payload(7)).unwrap();
//! assert_eq!(out[0].len(), 16);
//! ```

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use crate::integrity::splitmix64;
use crate::payload::PayloadSpec;
use crate::replication::{WrappedComputation, WrapperResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadId {
    /// `C = A * B` on `n x n` matrices of little-endian `f64`.
    Matmul { n: usize },
    /// 16-byte FNV-1a digest of `bytes` pseudo-random bytes.
    Checksum { bytes: usize },
    /// Busy loop of roughly this many iterations; outputs its accumulator.
    Spin { instructions: u64 },
}

impl WorkloadId {
    /// Inputs derived deterministically from `seed`, plus output sizes.
    pub fn payload(&self, seed: u64) -> PayloadSpec {
        let mut state = seed;
        match *self {
            WorkloadId::Matmul { n } => {
                let mut matrix = || {
                    let mut bytes = Vec::with_capacity(n * n * 8);
                    for _ in 0..n * n {
                        // Uniform in [-1, 1) with 53 bits of mantissa.
                        let x = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                    bytes
                };
                let (a, b) = (matrix(), matrix());
                PayloadSpec::new(vec![a, b], vec![n * n * 8])
            }
            WorkloadId::Checksum { bytes } => {
                let data = (0..bytes).map(|_| splitmix64(&mut state) as u8).collect();
                PayloadSpec::new(vec![data], vec![16])
            }
            WorkloadId::Spin { .. } => PayloadSpec::new(vec![splitmix64(&mut state).to_le_bytes().to_vec()], vec![8]),
        }
    }
}

impl WrappedComputation for WorkloadId {
    fn run(&self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> WrapperResult {
        match *self {
            WorkloadId::Matmul { n } => {
                let (a, b) = (read_f64s(inputs[0]), read_f64s(inputs[1]));
                if a.len() != n * n || b.len() != n * n || outputs[0].len() != n * n * 8 {
                    return Err(format!("matmul:{n} given mis-sized buffers").into());
                }
                let c = matmul(&a, &b, n);
                for (chunk, x) in outputs[0].chunks_exact_mut(8).zip(c) {
                    chunk.copy_from_slice(&x.to_le_bytes());
                }
            }
            WorkloadId::Checksum { .. } => {
                let data = inputs[0];
                let forward = fnv1a(data.iter().copied());
                let backward = fnv1a(data.iter().rev().copied());
                outputs[0][..8].copy_from_slice(&forward.to_le_bytes());
                outputs[0][8..16].copy_from_slice(&backward.to_le_bytes());
            }
            WorkloadId::Spin { instructions } => {
                let seed = u64::from_le_bytes(inputs[0][..8].try_into()?);
                outputs[0].copy_from_slice(&spin(seed, instructions).to_le_bytes());
            }
        }
        Ok(())
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Row-major product; each entry sums over `k` in ascending order.
pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn spin(seed: u64, iterations: u64) -> u64 {
    let mut acc = seed;
    for i in 0..iterations {
        acc = black_box(acc.rotate_left(5) ^ i);
    }
    acc
}

/// Independent integer operations forever; the calibration load.
pub fn spin_forever() -> ! {
    let (mut a, mut b, mut c, mut d) = (1u64, 2u64, 3u64, 4u64);
    loop {
        for _ in 0..1024 {
            a = a.wrapping_add(1);
            b = b.wrapping_add(3);
            c ^= 5;
            d = d.wrapping_add(7);
        }
        black_box((a, b, c, d));
    }
}

impl fmt::Display for WorkloadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkloadId::Matmul { n } => write!(f, "matmul:{n}"),
            WorkloadId::Checksum { bytes } => write!(f, "checksum:{bytes}"),
            WorkloadId::Spin { instructions } => write!(f, "spin:{instructions}"),
        }
    }
}

impl FromStr for WorkloadId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| format!("expected kind:parameter, got {s:?}"))?;
        let value: u64 = arg
            .parse()
            .map_err(|e| format!("bad parameter {arg:?} for {kind}: {e}"))?;
        if value == 0 {
            return Err(format!("{kind} parameter must be positive"));
        }
        let size = || usize::try_from(value).map_err(|e| e.to_string());
        match kind {
            "matmul" => Ok(WorkloadId::Matmul { n: size()? }),
            "checksum" => Ok(WorkloadId::Checksum { bytes: size()? }),
            "spin" => Ok(WorkloadId::Spin { instructions: value }),
            other => Err(format!("unknown workload {other:?} (expected matmul, checksum or spin)")),
        }
    }
}
