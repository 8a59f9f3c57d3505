//! Experiment configuration, read from TOML.
//!
//! ```toml
//! mode = "su_o_c"
//! steps = 100
//! seed = 7
//! compression_pct = 2.0
//! devices = 4
//!
//! [optimizer]
//! kind = "adam"
//! lr = 1e-3
//! ```

use std::path::{Path, PathBuf};

use nearstore_core::numerics::{LossScaleConfig, OptimizerConfig};
use nearstore_core::sim::SimConfig;
use nearstore_core::topology::{DeviceDesc, DeviceKind, FabricTopology};
use nearstore_core::workload::Mode;
use serde::{Deserialize, Serialize};

use crate::engine::{ComputeProfile, EngineConfig, Sparsity};
use crate::error::{Error, Result};

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "NEARSTORE_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub batch: usize,
    pub noise: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dims: vec![382, 128, 128], batch: 16, noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub steps: u64,
    pub seed: u64,
    pub compression_pct: Option<f64>,
    pub error_feedback: bool,
    /// Device count for the default topology; ignored when a topology is given.
    pub devices: usize,
    /// TOML file holding a `FabricTopology`.
    pub topology_file: Option<PathBuf>,
    /// Inline topology, used when no file is named.
    pub topology: Option<FabricTopology>,
    pub out_dir: PathBuf,
    pub deterministic: bool,
    pub stripe_bytes: u64,
    pub host_subgroup_elems: u64,
    pub decompress_chunk: usize,
    pub loss_scale: LossScaleConfig,
    pub max_grad_norm: Option<f32>,
    pub compute: ComputeProfile,
    pub sim: SimConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Base,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            steps: 10,
            seed: 0,
            compression_pct: None,
            error_feedback: false,
            devices: 4,
            topology_file: None,
            topology: None,
            out_dir: PathBuf::from("out"),
            deterministic: true,
            stripe_bytes: 4096,
            host_subgroup_elems: 16384,
            decompress_chunk: 64,
            loss_scale: LossScaleConfig::default(),
            max_grad_norm: Some(1.0),
            compute: ComputeProfile::default(),
            sim: SimConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode.compressed(), self.compression_pct) {
            (true, None) => return Err(Error::Config("mode su_o_c needs compression_pct".into())),
            (false, Some(_)) => {
                return Err(Error::Config(format!("compression_pct is only valid with mode su_o_c, not {}", self.mode)))
            }
            (true, Some(c)) if !(c > 0.0 && c <= 100.0) => {
                return Err(Error::Config(format!("compression_pct must lie in (0, 100], got {c}")))
            }
            _ => {}
        }
        if self.topology_file.is_none() && self.topology.is_none() && self.devices == 0 {
            return Err(Error::Config("devices must be at least 1".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    /// The topology file, the inline topology, or `devices` default devices
    /// (CSDs for near-storage modes, SSDs otherwise), in that order.
    pub fn resolve_topology(&self) -> Result<FabricTopology> {
        let topo = if let Some(path) = &self.topology_file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?
        } else if let Some(t) = &self.topology {
            t.clone()
        } else {
            let kind = if self.mode.near_storage() { DeviceKind::Csd } else { DeviceKind::Ssd };
            FabricTopology::uniform(DeviceDesc { kind, ..DeviceDesc::csd() }, self.devices)
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV).map_or_else(|| self.out_dir.clone(), PathBuf::from)
    }

    pub fn engine_config(&self, storage_dir: PathBuf) -> Result<EngineConfig> {
        self.validate()?;
        Ok(EngineConfig {
            mode: self.mode,
            optimizer: self.optimizer,
            dims: self.model.dims.clone(),
            batch: self.model.batch,
            noise: self.model.noise,
            seed: self.seed,
            topology: self.resolve_topology()?,
            stripe_bytes: self.stripe_bytes,
            host_subgroup_elems: self.host_subgroup_elems,
            sparsity: self.compression_pct.map(Sparsity::Budget),
            error_feedback: self.error_feedback,
            decompress_chunk: self.decompress_chunk,
            loss_scale: self.loss_scale,
            max_grad_norm: self.max_grad_norm,
            deterministic: self.deterministic,
            storage_dir,
            compute: self.compute,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_toml() {
        let c: ExperimentConfig = toml::from_str("mode = \"su_o_c\"\ncompression_pct = 2.0\n[optimizer]\nlr = 0.01\n").unwrap();
        assert_eq!(c.mode, Mode::SuOC);
        assert_eq!(c.optimizer.lr, 0.01);
        assert_eq!(c.optimizer.beta1, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn compression_pct_iff_compressed() {
        let c = ExperimentConfig { mode: Mode::SuOC, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { mode: Mode::Su, compression_pct: Some(5.0), ..Default::default() };
        assert!(c.validate().is_err());
        for bad in [0.0, -1.0, 100.5, f64::NAN] {
            let c = ExperimentConfig { mode: Mode::SuOC, compression_pct: Some(bad), ..Default::default() };
            assert!(c.validate().is_err(), "{bad}");
        }
        let c = ExperimentConfig { mode: Mode::SuOC, compression_pct: Some(100.0), ..Default::default() };
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("mdoe = \"su\"\n").is_err());
    }

    #[test]
    fn missing_topology_file_is_an_error() {
        let c = ExperimentConfig { topology_file: Some("/nonexistent/topo.toml".into()), ..Default::default() };
        assert!(matches!(c.resolve_topology(), Err(Error::Io { .. })));
    }

    #[test]
    fn default_topology_follows_mode() {
        let c = ExperimentConfig { mode: Mode::Su, devices: 3, ..Default::default() };
        let t = c.resolve_topology().unwrap();
        assert_eq!(t.devices.len(), 3);
        assert!(t.devices.iter().all(|d| d.is_csd()));
        let c = ExperimentConfig { mode: Mode::Base, ..Default::default() };
        assert!(c.resolve_topology().unwrap().devices.iter().all(|d| !d.is_csd()));
    }
}
