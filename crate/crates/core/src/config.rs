//! Run configuration. Every section has defaults and rejects unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::checkpoint::sha256_hex;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::objectives::LossWeights;
use crate::optim::AdamConfig;
use crate::raster::RasterSettings;
use crate::refiner::RefinerConfig;
use crate::scene::ActivationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
    pub z_near: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        let s = RasterSettings::default();
        Self { tile_size: s.tile_size, background: s.background, z_near: s.z_near }
    }
}

impl RasterConfig {
    pub fn settings(&self) -> RasterSettings {
        RasterSettings { tile_size: self.tile_size, background: self.background, z_near: self.z_near }
    }
}

/// Direct per-scene optimization of raw Gaussian parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub lr_offset: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_sh: f64,
    /// Initial scale as a multiple of the mean nearest-anchor spacing.
    pub init_scale_factor: f64,
    /// Adam epsilon. Large enough that Gaussians seen only at grazing
    /// coverage do not take full-size steps on vanishing gradients.
    pub adam_eps: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_offset: 0.05,
            lr_opacity: 0.05,
            lr_scale: 0.01,
            lr_rotation: 0.01,
            lr_sh: 0.05,
            init_scale_factor: 0.5,
            adam_eps: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1: AdamConfig,
    pub stage2: AdamConfig,
    /// Steps between resumable checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 300,
            stage1: AdamConfig::default(),
            stage2: AdamConfig { lr: 3e-4, ..Default::default() },
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub anchors: AnchorConfig,
    pub activation: ActivationConfig,
    pub raster: RasterConfig,
    pub features: FeatureConfig,
    pub decoder: DecoderConfig,
    pub refiner: RefinerConfig,
    pub loss: LossWeights,
    pub fit: FitConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.activation.validate()?;
        self.features.validate()?;
        self.decoder.validate()?;
        self.refiner.validate()?;
        self.loss.validate()?;
        self.train.stage1.validate()?;
        self.train.stage2.validate()?;
        if self.raster.tile_size == 0 || !(self.raster.z_near > 0.0) {
            return Err(Error::Config("tile size and z_near must be positive".into()));
        }
        if self.raster.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background must lie in [0, 1]".into()));
        }
        let f = &self.fit;
        if [f.lr_offset, f.lr_opacity, f.lr_scale, f.lr_rotation, f.lr_sh, f.init_scale_factor, f.adam_eps].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("fit learning rates, init scale factor and adam_eps must be positive".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
