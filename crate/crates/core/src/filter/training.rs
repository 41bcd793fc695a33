use super::detect::{
    detect_by_register, detect_fixed_pattern, detect_global_proxy, detect_hijackee_rel,
};
use super::hijack::hijack_scores;
use super::partition::{build_partition, SpuriousPartition};
use super::thresholds::Thresholds;
use crate::error::{Error, Result};
use crate::image::{Axis, Image};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;
use crate::vit::{forward, FeatureMap, ModelState};

/// Teacher-side result of filtering one crop.
#[derive(Clone, Debug)]
pub struct FilterOutput<T> {
    pub z_cat: FeatureMap<T>,
    pub axis: Axis,
    /// Positions of the crop region inside `z_cat`, row-major over the crop grid.
    pub crop_region: Vec<usize>,
    /// Teacher tokens of the crop region, in crop-local order.
    pub z_crop: Tensor<T>,
    /// Partition over crop-local indices.
    pub partition: SpuriousPartition,
}

/// Index sets of the first (crop) and second (reference) halves of a
/// `g × g` + `g × g` composite.
pub fn composite_regions(g: usize, axis: Axis) -> (Vec<usize>, Vec<usize>) {
    match axis {
        Axis::Horizontal => {
            let w = 2 * g;
            let src = (0..g)
                .flat_map(|r| (0..g).map(move |c| r * w + c))
                .collect();
            let rf = (0..g)
                .flat_map(|r| (g..w).map(move |c| r * w + c))
                .collect();
            (src, rf)
        }
        Axis::Vertical => ((0..g * g).collect(), (g * g..2 * g * g).collect()),
    }
}

/// Runs the frozen teacher on `crop ⊕ reference` along a randomly drawn
/// axis and on the reference alone, then labels every crop-region token.
pub fn training_filter<T: Scalar>(
    teacher: &ModelState<T>,
    crop: &Image<T>,
    reference: &Image<T>,
    thresholds: &Thresholds,
    registers: Option<&Tensor<T>>,
    rng: &mut Rng,
) -> Result<FilterOutput<T>> {
    let size = teacher.config.img_size;
    for (name, im) in [("crop", crop), ("reference", reference)] {
        if im.height() != size || im.width() != size {
            return Err(Error::shape(
                "training_filter",
                format!(
                    "{name} is {}x{}, expected base resolution {size}x{size}",
                    im.height(),
                    im.width()
                ),
            ));
        }
    }
    let axis = if rng.coin() {
        Axis::Horizontal
    } else {
        Axis::Vertical
    };
    let composite = crop.concat(reference, axis)?;
    let (z_cat, trace) = forward(teacher, &composite, true)?;
    let trace = trace.expect("attention requested");
    let (z_ref, _) = forward(teacher, reference, false)?;
    let g = teacher.config.grid();
    let (src, rf) = composite_regions(g, axis);
    let z_crop = z_cat.tokens().gather_rows(&src)?;
    let crop_map = FeatureMap::new(g, g, z_crop.clone())?;

    let tau = thresholds.tau_fp_gp;
    let fp = detect_fixed_pattern(&crop_map, &z_ref, tau)?;
    let mut local = vec![usize::MAX; z_cat.len()];
    for (k, &i) in src.iter().enumerate() {
        local[i] = k;
    }
    let to_local = |v: Vec<usize>| v.into_iter().map(|i| local[i]).collect::<Vec<_>>();
    let gp = to_local(detect_global_proxy(&z_cat, &z_ref, &src, &rf, tau, tau)?);
    let scores = hijack_scores(&trace, &src, &src)?;
    let ah = to_local(detect_hijackee_rel(&scores, thresholds.tau_ah_rel));
    let reg = match registers {
        Some(r) => to_local(detect_by_register(
            &z_cat,
            r,
            Some(&src),
            thresholds.tau_reg,
        )?),
        None => Vec::new(),
    };
    let partition = build_partition(&fp, &gp, &ah, &reg, src.len())?;
    Ok(FilterOutput {
        z_cat,
        axis,
        crop_region: src,
        z_crop,
        partition,
    })
}
