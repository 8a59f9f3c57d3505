//! Where bytes and parameters live: RAID0 striping, the equal parameter
//! partition over devices, and subgroup planning for accelerator memory.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OptimizerKind, Variable};

/// Half-open `[offset, offset + len)`. Units depend on context (bytes or elements).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Extent {
    pub offset: u64,
    pub len: u64,
}

impl Extent {
    pub const fn new(offset: u64, len: u64) -> Self {
        Self { offset, len }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn intersect(&self, other: &Extent) -> Option<Extent> {
        let start = self.offset.max(other.offset);
        let end = self.end().min(other.end());
        (start < end).then(|| Extent::new(start, end - start))
    }

    pub fn overlaps(&self, other: &Extent) -> bool {
        self.intersect(other).is_some()
    }

    /// Scales an element extent to a byte extent.
    pub fn scaled(&self, width: u64) -> Extent {
        Extent::new(self.offset * width, self.len * width)
    }
}

/// Maps a global byte extent of a RAID0 volume onto member devices.
///
/// Stripe `s` lives on device `s % n` at device offset `(s / n) * stripe_size`.
/// Pieces come back in global order, so concatenating them rebuilds the
/// extent. Adjacent pieces landing contiguously on the same device are merged,
/// which makes a one-device volume an identity mapping.
pub fn raid0_map(global: Extent, stripe_size: u64, n_devices: usize) -> Vec<(usize, Extent)> {
    assert!(stripe_size > 0 && n_devices > 0, "stripe size and device count must be positive");
    let n = n_devices as u64;
    let mut out: Vec<(usize, Extent)> = Vec::new();
    let mut pos = global.offset;
    while pos < global.end() {
        let stripe = pos / stripe_size;
        let within = pos % stripe_size;
        let take = (stripe_size - within).min(global.end() - pos);
        let dev = (stripe % n) as usize;
        let local = Extent::new((stripe / n) * stripe_size + within, take);
        match out.last_mut() {
            Some((d, e)) if *d == dev && e.end() == local.offset => e.len += take,
            _ => out.push((dev, local)),
        }
        pos += take;
    }
    out
}

/// Bytes each device of a RAID0 volume needs to hold `volume_len` bytes.
pub fn raid0_device_len(volume_len: u64, stripe_size: u64, n_devices: usize) -> u64 {
    let stripes = volume_len.div_ceil(stripe_size);
    stripes.div_ceil(n_devices as u64) * stripe_size
}

/// Per-device ownership of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// `(device_id, element extent)` in device order; extents are contiguous and cover `[0, N)`.
    pub segments: Vec<(usize, Extent)>,
}

/// One piece of a global range as seen by its owning device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub device: usize,
    pub global: Extent,
    /// Offset of `global.offset` inside the device's segment.
    pub local_offset: u64,
}

impl Partition {
    pub fn total(&self) -> u64 {
        self.segments.last().map_or(0, |(_, e)| e.end())
    }

    pub fn segment(&self, device: usize) -> Extent {
        self.segments[device].1
    }

    pub fn owner_of(&self, element: u64) -> Option<usize> {
        self.segments.iter().find(|(_, e)| e.offset <= element && element < e.end()).map(|(d, _)| *d)
    }

    /// Cuts a global element range at device boundaries.
    pub fn split(&self, range: Extent) -> Result<Vec<Piece>> {
        if range.end() > self.total() {
            return Err(Error::InvalidArgument(format!(
                "range [{}, {}) exceeds partitioned parameter count {}",
                range.offset,
                range.end(),
                self.total()
            )));
        }
        Ok(self
            .segments
            .iter()
            .filter_map(|&(device, seg)| {
                seg.intersect(&range).map(|g| Piece { device, global: g, local_offset: g.offset - seg.offset })
            })
            .collect())
    }
}

/// Splits `n` parameters over `device_count` devices in index order. The first
/// `n % device_count` devices get one extra element. Only `n` and the device
/// count matter; devices get an empty segment when `n < device_count`.
pub fn partition_parameters(n: u64, device_count: usize) -> Partition {
    assert!(device_count >= 1, "need at least one device");
    let d = device_count as u64;
    let (q, r) = (n / d, n % d);
    let mut offset = 0;
    let segments = (0..device_count)
        .map(|i| {
            let len = q + u64::from((i as u64) < r);
            let e = Extent::new(offset, len);
            offset += len;
            (i, e)
        })
        .collect();
    Partition { segments }
}

/// One subgroup of a device's owned segment, processed by a single tasklet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tasklet {
    pub index: usize,
    /// Element range relative to the device's segment.
    pub range: Extent,
    /// State variables loaded and written back, in addition to the gradient.
    pub states: &'static [Variable],
}

impl Tasklet {
    pub fn footprint_bytes(&self, kind: OptimizerKind) -> u64 {
        self.range.len * kind.update_bytes_per_element()
    }
}

/// Largest subgroup (in elements) whose update buffers fit `capacity` bytes.
pub fn subgroup_elements(capacity: u64, kind: OptimizerKind) -> u64 {
    capacity / kind.update_bytes_per_element()
}

/// Ceiling partition of a `segment_len`-element segment into subgroups that
/// each fit the accelerator memory.
pub fn plan_subgroups(segment_len: u64, capacity: u64, kind: OptimizerKind) -> Result<Vec<Tasklet>> {
    let d = subgroup_elements(capacity, kind);
    if d == 0 {
        return Err(Error::Config(format!(
            "accelerator memory of {capacity} bytes cannot hold one {} element ({} bytes)",
            kind.name(),
            kind.update_bytes_per_element()
        )));
    }
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < segment_len {
        let len = d.min(segment_len - offset);
        out.push(Tasklet { index: out.len(), range: Extent::new(offset, len), states: kind.state_variables() });
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn raid0_two_devices() {
        let s = 10;
        let m = raid0_map(Extent::new(0, 4 * s), s, 2);
        assert_eq!(
            m,
            vec![(0, Extent::new(0, s)), (1, Extent::new(0, s)), (0, Extent::new(s, s)), (1, Extent::new(s, s))]
        );
    }

    #[test]
    fn raid0_single_device_is_identity() {
        assert_eq!(raid0_map(Extent::new(7, 100), 16, 1), vec![(0, Extent::new(7, 100))]);
    }

    #[test]
    fn raid0_unaligned() {
        let m = raid0_map(Extent::new(5, 10), 4, 3);
        // stripes 1 (dev1), 2 (dev2), 3 (dev0)
        assert_eq!(m, vec![(1, Extent::new(1, 3)), (2, Extent::new(0, 4)), (0, Extent::new(4, 3))]);
        assert_eq!(m.iter().map(|(_, e)| e.len).sum::<u64>(), 10);
    }

    #[test]
    fn partition_examples() {
        let p = partition_parameters(10, 3);
        let sizes: Vec<u64> = p.segments.iter().map(|(_, e)| e.len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(partition_parameters(10, 1).segments, vec![(0, Extent::new(0, 10))]);
        assert_eq!(p.owner_of(4), Some(1));
    }

    #[test]
    fn split_at_device_boundary() {
        let p = partition_parameters(10, 3);
        let pieces = p.split(Extent::new(2, 4)).unwrap();
        assert_eq!(
            pieces,
            vec![
                Piece { device: 0, global: Extent::new(2, 2), local_offset: 2 },
                Piece { device: 1, global: Extent::new(4, 2), local_offset: 0 },
            ]
        );
        assert!(p.split(Extent::new(8, 3)).is_err());
    }

    #[test]
    fn subgroup_examples() {
        let cap = 4 * OptimizerKind::Adam.update_bytes_per_element();
        let t = plan_subgroups(10, cap, OptimizerKind::Adam).unwrap();
        let ranges: Vec<Extent> = t.iter().map(|t| t.range).collect();
        assert_eq!(ranges, vec![Extent::new(0, 4), Extent::new(4, 4), Extent::new(8, 2)]);

        assert_eq!(plan_subgroups(10, 1 << 20, OptimizerKind::Adam).unwrap().len(), 1);
        assert!(matches!(plan_subgroups(10, 15, OptimizerKind::Adam), Err(Error::Config(_))));
    }

    #[test]
    fn sgd_subgroups_are_larger() {
        let cap = 1200;
        let adam = plan_subgroups(1000, cap, OptimizerKind::Adam).unwrap();
        let sgd = plan_subgroups(1000, cap, OptimizerKind::SgdMomentum).unwrap();
        assert!(sgd[0].range.len >= adam[0].range.len);
        assert_eq!(adam[0].range.len, 75);
        assert_eq!(sgd[0].range.len, 100);
        assert!(adam.iter().all(|t| t.footprint_bytes(OptimizerKind::Adam) <= cap));
    }
}
