use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toy ViT hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    /// Square input side in pixels.
    pub img_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Ring width divisor: `N_reg = ceil(min(H, W) / register_factor)`.
    pub register_factor: f64,
    /// Amplitude of the sinusoidal position code; 0 disables it.
    pub pos_scale: f64,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            img_size: 32,
            patch_size: 4,
            channels: 3,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            register_factor: 4.0,
            pos_scale: 0.5,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.img_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::invalid(
                "dim must be a multiple of 4 for the 2D position code",
            ));
        }
        if !(self.register_factor > 0.0) {
            return Err(Error::invalid("register_factor must be positive"));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::invalid("depth, mlp_ratio and channels must be >= 1"));
        }
        Ok(())
    }

    /// Token-grid side at base resolution.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Low-rank adapter settings. Adapters attach to the Q, K, V and O
/// projections of every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Std of the Gaussian init of the `A` factor; `B` starts at zero.
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}
