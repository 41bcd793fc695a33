//! Toy Vision Transformer: patch embedding, pre-norm blocks, attention
//! capture, low-rank adapters and the register ring.

mod config;
mod forward;
mod layout;
mod model;
mod types;

pub use config::{AdapterConfig, ViTConfig};
pub use forward::{bind, forward, forward_grid, forward_on_tape, ModelVars, Trainable};
pub use layout::{
    inject_register_bias, make_register_layout, merge_regions, position_code, ring_width,
    split_regions, RegisterLayout, TokenGrid,
};
pub use model::{
    apply_adapters, Adapters, Block, BlockAdapters, EffectiveWeights, LoraPair, ModelState,
    Projection,
};
pub use types::{AttentionTrace, FeatureMap};

use crate::error::Result;
use crate::image::Image;
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Injects a fresh noise ring around `image` and runs the model on the
/// padded grid; returns the image-region map, the register tokens, and the
/// layout used.
pub fn forward_with_registers<T: Scalar>(
    model: &ModelState<T>,
    image: &Image<T>,
    rng: &mut Rng,
) -> Result<(FeatureMap<T>, Tensor<T>, RegisterLayout)> {
    let p = model.config.patch_size;
    let layout = make_register_layout(
        image.height() / p,
        image.width() / p,
        model.config.register_factor,
    )?;
    let padded = inject_register_bias(image, &layout, p, rng)?;
    let (fm, _) = forward_grid(model, &padded, &layout.token_grid(), false)?;
    let (z, reg) = split_regions(&fm, &layout)?;
    Ok((z, reg, layout))
}
