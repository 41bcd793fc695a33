use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Thresholds;
use crate::image::Normalization;
use crate::vit::AdapterConfig;

/// Loss temperatures and balancing factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_spu: f64,
    pub lambda_uni: f64,
    pub tau_nce: f64,
    pub tau_uni: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_spu: 1.0,
            lambda_uni: 0.1,
            tau_nce: 0.1,
            tau_uni: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_nce > 0.0 && self.tau_uni > 0.0) {
            return Err(Error::invalid("loss temperatures must be positive"));
        }
        if !(self.lambda_spu >= 0.0 && self.lambda_uni >= 0.0) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Random-resized-crop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Crops per image.
    pub n: usize,
    /// Area fraction range.
    pub scale: [f64; 2],
    /// Width/height ratio range.
    pub ratio: [f64; 2],
    /// Bilinear samples per output cell along each axis in ROI-Align.
    pub roi_samples: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            n: 2,
            scale: [0.3, 0.9],
            ratio: [0.75, 4.0 / 3.0],
            roi_samples: 2,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        let [rlo, rhi] = self.ratio;
        if self.n == 0 || self.roi_samples == 0 {
            return Err(Error::invalid("crop count and ROI samples must be >= 1"));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "crop scale range {:?} must satisfy 0 < lo <= hi <= 1",
                self.scale
            )));
        }
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::invalid(format!(
                "crop ratio range {:?} is empty",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// First-order adaptive-moment optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Full refinement recipe; serialized as the training config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of total steps before registers join the filter.
    pub register_warmup: f64,
    pub adapter: AdapterConfig,
    pub thresholds: Thresholds,
    pub weights: LossWeights,
    pub crops: CropConfig,
    pub optim: AdamConfig,
    pub normalization: Normalization,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 2,
            batch_size: 8,
            register_warmup: 0.25,
            adapter: AdapterConfig::default(),
            thresholds: Thresholds::default(),
            weights: LossWeights::default(),
            crops: CropConfig::default(),
            optim: AdamConfig::default(),
            normalization: Normalization::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.register_warmup) {
            return Err(Error::invalid("register_warmup must lie in [0, 1]"));
        }
        if !(self.optim.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        self.thresholds.validate()?;
        self.weights.validate()?;
        self.crops.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RefineConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RefineConfig>(&s).unwrap(), c);
        let partial: RefineConfig =
            serde_json::from_str(r#"{"epochs": 3, "optim": {"lr": 0.01}}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.optim.beta2, 0.999);
        assert!(RefineConfig { batch_size: 0, ..c }.validate().is_err());
    }
}
