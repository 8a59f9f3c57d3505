//! Per-block Top-K gradient compression and the chunked scatter decompressor.
//!
//! Wire format (little-endian): `block_len: u64`, `k: u64`, then `k` u32
//! block-relative indices, then `k` fp16 values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use half::f16;

use crate::error::{Error, Result};
use crate::numerics::{narrow, widen};

pub const INDEX_WIDTH: usize = 4;
pub const VALUE_WIDTH: usize = 2;
pub const HEADER_LEN: usize = 16;

/// Indices and values kept from one dense block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub block_len: usize,
    /// Strictly increasing, each `< block_len`.
    pub indices: Vec<u32>,
    pub values: Vec<f16>,
}

impl SparseGradient {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Index + value payload, `k * 6` bytes.
    pub fn wire_size(&self) -> usize {
        wire_payload(self.k())
    }

    /// Full record including the header.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.wire_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::CorruptStream(format!(
                "{} indices but {} values",
                self.indices.len(),
                self.values.len()
            )));
        }
        if self.k() > self.block_len {
            return Err(Error::CorruptStream(format!("k = {} exceeds block length {}", self.k(), self.block_len)));
        }
        let mut prev: Option<u32> = None;
        for &idx in &self.indices {
            check_index(idx, prev, self.block_len)?;
            prev = Some(idx);
        }
        Ok(())
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(&(self.block_len as u64).to_le_bytes());
        out.extend_from_slice(&(self.k() as u64).to_le_bytes());
        for idx in &self.indices {
            out.extend_from_slice(&idx.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Parses and validates one record. Trailing bytes are rejected.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptStream(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let block_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let k = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let expected = (k as u128) * (INDEX_WIDTH + VALUE_WIDTH) as u128 + HEADER_LEN as u128;
        if expected != bytes.len() as u128 {
            return Err(Error::CorruptStream(format!("k = {k} needs {expected} bytes, record has {}", bytes.len())));
        }
        let k = k as usize;
        let block_len = usize::try_from(block_len).map_err(|_| Error::CorruptStream("block length overflow".into()))?;
        let idx_end = HEADER_LEN + k * INDEX_WIDTH;
        let indices = bytes[HEADER_LEN..idx_end]
            .chunks_exact(INDEX_WIDTH)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = bytes[idx_end..]
            .chunks_exact(VALUE_WIDTH)
            .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let sg = Self { block_len, indices, values };
        sg.validate()?;
        Ok(sg)
    }
}

pub fn wire_payload(k: usize) -> usize {
    k * (INDEX_WIDTH + VALUE_WIDTH)
}

fn check_index(idx: u32, prev: Option<u32>, block_len: usize) -> Result<()> {
    if idx as usize >= block_len {
        return Err(Error::CorruptStream(format!("index {idx} out of range for block of {block_len}")));
    }
    if let Some(p) = prev {
        if idx <= p {
            return Err(Error::CorruptStream(format!("index {idx} follows {p}: duplicate or unsorted")));
        }
    }
    Ok(())
}

/// Keeps the `k` largest-magnitude entries. Equal magnitudes prefer the lower index.
pub fn compress_topk(dense: &[f16], k: usize) -> Result<SparseGradient> {
    if k == 0 || k > dense.len() {
        return Err(Error::KOutOfRange { k, len: dense.len() });
    }
    if dense.len() > u32::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!("block of {} elements exceeds u32 indexing", dense.len())));
    }
    // Sign-cleared bits order finite magnitudes; NaN sorts above Inf.
    let key = |i: u32| (core::cmp::Reverse(dense[i as usize].to_bits() & 0x7fff), i);
    let mut order: Vec<u32> = (0..dense.len() as u32).collect();
    if k < order.len() {
        order.select_nth_unstable_by_key(k - 1, |&i| key(i));
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| dense[i as usize]).collect();
    Ok(SparseGradient { block_len: dense.len(), indices: order, values })
}

/// Largest `k` whose record (header plus `k` pairs) fits in `compression_pct`
/// percent of the block's dense fp32 gradient bytes, clamped to `[1, block_len]`.
pub fn k_for_budget(block_len: usize, compression_pct: f64) -> usize {
    if block_len == 0 {
        return 0;
    }
    let budget = compression_pct / 100.0 * (4 * block_len) as f64;
    let room = budget - HEADER_LEN as f64;
    let k = if room <= 0.0 { 0 } else { (room / wire_payload(1) as f64) as usize };
    k.clamp(1, block_len)
}

/// Writes the entries of `sg` whose index falls in `window` into
/// `out[idx - window.start]`, walking the stream `chunk` entries at a time.
/// Positions not named by the stream are left as they are.
pub fn scatter_range(sg: &SparseGradient, window: Range<usize>, chunk: usize, out: &mut [f32]) -> Result<usize> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
    }
    if sg.indices.len() != sg.values.len() {
        return Err(Error::CorruptStream("index and value lists differ in length".into()));
    }
    if window.end > sg.block_len || out.len() != window.len() {
        return Err(Error::InvalidArgument(format!(
            "window {:?} with output of {} does not fit block of {}",
            window,
            out.len(),
            sg.block_len
        )));
    }
    let mut prev = None;
    let mut written = 0;
    for (idx_chunk, val_chunk) in sg.indices.chunks(chunk).zip(sg.values.chunks(chunk)) {
        for (&idx, &val) in idx_chunk.iter().zip(val_chunk) {
            check_index(idx, prev, sg.block_len)?;
            prev = Some(idx);
            let pos = idx as usize;
            if window.contains(&pos) {
                out[pos - window.start] = widen(val);
                written += 1;
            }
        }
    }
    Ok(written)
}

/// Zero-initialised gradient buffer filled from the sparse stream.
pub fn decompress_scatter(sg: &SparseGradient, chunk: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; sg.block_len];
    scatter_range(sg, 0..sg.block_len, chunk, &mut out)?;
    Ok(out)
}

/// Optional residual accumulation for Top-K. Residuals are kept unscaled so a
/// changing loss scale does not corrupt them.
#[derive(Debug, Clone)]
pub struct ErrorFeedback {
    residual: Vec<f32>,
}

impl ErrorFeedback {
    pub fn new(len: usize) -> Self {
        Self { residual: vec![0.0; len] }
    }

    pub fn residual(&self) -> &[f32] {
        &self.residual
    }

    pub fn reset(&mut self) {
        self.residual.iter_mut().for_each(|r| *r = 0.0);
    }

    /// Compresses `dense + residual` and keeps what was dropped for the next call.
    pub fn compress(&mut self, dense: &[f16], k: usize, loss_scale: f32) -> Result<SparseGradient> {
        if dense.len() != self.residual.len() {
            return Err(Error::LengthMismatch { expected: self.residual.len(), actual: dense.len() });
        }
        let compensated: Vec<f32> =
            dense.iter().zip(&self.residual).map(|(&g, &r)| widen(g) + r * loss_scale).collect();
        let narrowed: Vec<f16> = compensated.iter().map(|&x| narrow(x)).collect();
        let sg = compress_topk(&narrowed, k)?;
        for (r, &c) in self.residual.iter_mut().zip(&compensated) {
            *r = c / loss_scale;
        }
        for (&idx, &val) in sg.indices.iter().zip(&sg.values) {
            let i = idx as usize;
            self.residual[i] = (compensated[i] - widen(val)) / loss_scale;
        }
        Ok(sg)
    }
}
