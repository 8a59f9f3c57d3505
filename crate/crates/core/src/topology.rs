//! Storage fabric description: a shared host link, plain SSDs and
//! computational storage devices with a private internal switch.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GB: f64 = 1e9;
pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Ssd,
    Csd,
}

/// Bandwidths in bytes/s, capacities in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceDesc {
    pub kind: DeviceKind,
    pub read_bw: f64,
    pub write_bw: f64,
    /// SSD <-> accelerator path, CSD only.
    pub internal_link_bw: f64,
    /// Accelerator DRAM, CSD only.
    pub accel_mem_capacity: u64,
    pub accel_update_throughput: f64,
    pub accel_decomp_throughput: f64,
}

impl Default for DeviceDesc {
    fn default() -> Self {
        Self::csd()
    }
}

impl DeviceDesc {
    pub fn csd() -> Self {
        Self {
            kind: DeviceKind::Csd,
            read_bw: 3.2 * GB,
            write_bw: 3.0 * GB,
            internal_link_bw: 3.2 * GB,
            accel_mem_capacity: 4 * GIB,
            accel_update_throughput: 7.0 * GB,
            accel_decomp_throughput: 7.0 * GB,
        }
    }

    pub fn ssd() -> Self {
        Self { kind: DeviceKind::Ssd, ..Self::csd() }
    }

    pub fn is_csd(&self) -> bool {
        self.kind == DeviceKind::Csd
    }
}

/// Devices behind a shared expansion switch with its own uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionGroup {
    pub devices: Vec<usize>,
    pub uplink_bw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricTopology {
    pub host_link_bw: f64,
    pub devices: Vec<DeviceDesc>,
    pub expansion: Vec<ExpansionGroup>,
}

impl Default for FabricTopology {
    fn default() -> Self {
        Self { host_link_bw: 16.0 * GB, devices: Vec::new(), expansion: Vec::new() }
    }
}

impl FabricTopology {
    pub fn uniform(desc: DeviceDesc, n: usize) -> Self {
        Self { devices: alloc::vec![desc; n], ..Self::default() }
    }

    pub fn with_kind(&self, kind: DeviceKind) -> Self {
        let mut t = self.clone();
        t.devices.iter_mut().for_each(|d| d.kind = kind);
        t
    }

    pub fn expansion_group_of(&self, device: usize) -> Option<usize> {
        self.expansion.iter().position(|g| g.devices.contains(&device))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {x}")))
            }
        };
        positive("host_link_bw", self.host_link_bw)?;
        if self.devices.is_empty() {
            return Err(Error::Config("topology has no devices".into()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            positive(&format!("device {i} read_bw"), d.read_bw)?;
            positive(&format!("device {i} write_bw"), d.write_bw)?;
            if d.is_csd() {
                positive(&format!("device {i} internal_link_bw"), d.internal_link_bw)?;
                positive(&format!("device {i} accel_update_throughput"), d.accel_update_throughput)?;
                positive(&format!("device {i} accel_decomp_throughput"), d.accel_decomp_throughput)?;
                if d.accel_mem_capacity == 0 {
                    return Err(Error::Config(format!("device {i} accel_mem_capacity must be positive")));
                }
            }
        }
        let mut seen = alloc::vec![false; self.devices.len()];
        for g in &self.expansion {
            positive("expansion uplink_bw", g.uplink_bw)?;
            for &d in &g.devices {
                if d >= self.devices.len() || seen[d] {
                    return Err(Error::Config(format!("expansion group lists device {d} twice or out of range")));
                }
                seen[d] = true;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let t = FabricTopology::uniform(DeviceDesc::csd(), 4);
        t.validate().unwrap();
        assert_eq!(t.devices[0].accel_mem_capacity, 4 * GIB);
    }

    #[test]
    fn rejects_bad_values() {
        let mut t = FabricTopology::uniform(DeviceDesc::csd(), 2);
        t.devices[1].write_bw = 0.0;
        assert!(t.validate().is_err());
        let mut t = FabricTopology::uniform(DeviceDesc::csd(), 2);
        t.devices[0].accel_mem_capacity = 0;
        assert!(t.validate().is_err());
        let mut t = FabricTopology::uniform(DeviceDesc::ssd(), 2);
        t.devices[0].accel_mem_capacity = 0;
        t.validate().unwrap();
        t.expansion.push(ExpansionGroup { devices: alloc::vec![0, 0], uplink_bw: 1.0 });
        assert!(t.validate().is_err());
        assert!(FabricTopology::default().validate().is_err());
    }
}
