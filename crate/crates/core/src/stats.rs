//! Corpus-level spurious-token statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    build_partition, composite_regions, detect_fixed_pattern, detect_global_proxy,
    detect_hijackee_abs, hijack_scores, SpuriousPartition, Thresholds,
};
use crate::image::{Axis, Image};
use crate::numerics::Rng;
use crate::scalar::Scalar;
use crate::vit::{
    forward_grid, forward_with_registers, inject_register_bias, make_register_layout,
    split_regions, ModelState,
};

/// Counts for one measured image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub image: String,
    pub n_tokens: usize,
    pub fp: usize,
    pub gp: usize,
    pub ah: usize,
    pub total_ratio: f64,
}

/// Labels the tokens of `image` with the inference-time rules. The model
/// sees every input inside a fresh noise ring; only image-region tokens are
/// scored. Hijack scores count attention from every token of the padded
/// grid, ring included, onto image keys.
pub fn measure_image<T: Scalar>(
    model: &ModelState<T>,
    image: &Image<T>,
    reference: &Image<T>,
    thresholds: &Thresholds,
    rng: &mut Rng,
) -> Result<SpuriousPartition> {
    let p = model.config.patch_size;
    let (h, w) = (image.height() / p, image.width() / p);
    if h != w || reference.height() != image.height() || reference.width() != image.width() {
        return Err(Error::shape(
            "measure_image",
            format!(
                "square image and equal-size reference required, got {}x{} and {}x{}",
                image.height(),
                image.width(),
                reference.height(),
                reference.width()
            ),
        ));
    }
    let layout = make_register_layout(h, w, model.config.register_factor)?;
    let padded = inject_register_bias(image, &layout, p, rng)?;
    let (full, trace) = forward_grid(model, &padded, &layout.token_grid(), true)?;
    let (z, _) = split_regions(&full, &layout)?;
    let (z_ref, _, _) = forward_with_registers(model, reference, rng)?;

    let fp = detect_fixed_pattern(&z, &z_ref, thresholds.tau_fp)?;

    let composite = image.concat(reference, Axis::Horizontal)?;
    let (z_cat, _, _) = forward_with_registers(model, &composite, rng)?;
    let (src, rf) = composite_regions(h, Axis::Horizontal);
    let mut local = vec![usize::MAX; z_cat.len()];
    for (k, &i) in src.iter().enumerate() {
        local[i] = k;
    }
    let gp: Vec<usize> = detect_global_proxy(
        &z_cat,
        &z_ref,
        &src,
        &rf,
        thresholds.tau_gp,
        thresholds.tau_fp,
    )?
    .into_iter()
    .map(|i| local[i])
    .collect();

    let queries: Vec<usize> = (0..layout.total()).collect();
    let scores = hijack_scores(
        &trace.expect("attention requested"),
        &queries,
        &layout.image_indices,
    )?;
    let mut pos = vec![usize::MAX; layout.total()];
    for (k, &i) in layout.image_indices.iter().enumerate() {
        pos[i] = k;
    }
    let ah: Vec<usize> = detect_hijackee_abs(&scores, thresholds.tau_ah_abs)
        .into_iter()
        .map(|i| pos[i])
        .collect();
    build_partition(&fp, &gp, &ah, &[], h * w)
}

/// Measures every image against the next one (cyclically) as reference.
/// Image `i` draws its ring noise from `Rng::new(seed).split(i)`.
pub fn corpus_stats<T: Scalar>(
    model: &ModelState<T>,
    images: &[(String, Image<T>)],
    thresholds: &Thresholds,
    seed: u64,
) -> Result<Vec<ImageStats>> {
    if images.len() < 2 {
        return Err(Error::invalid(
            "statistics need at least two images (each is referenced against another)",
        ));
    }
    thresholds.validate()?;
    let root = Rng::new(seed);
    (0..images.len())
        .into_par_iter()
        .map(|i| {
            let (name, img) = &images[i];
            let reference = &images[(i + 1) % images.len()].1;
            let part = measure_image(model, img, reference, thresholds, &mut root.split(i as u64))?;
            Ok(ImageStats {
                image: name.clone(),
                n_tokens: part.total,
                fp: part.fp.len(),
                gp: part.gp.len(),
                ah: part.ah.len(),
                total_ratio: part.ratio(),
            })
        })
        .collect()
}

pub fn mean_ratio(rows: &[ImageStats]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.total_ratio).sum::<f64>() / rows.len() as f64
}

pub const STATS_HEADER: [&str; 6] = ["image", "n_tokens", "fp", "gp", "ah", "total_ratio"];

/// CSV body: one row per image followed by a `mean` row whose count
/// columns are per-image averages.
pub fn stats_table(rows: &[ImageStats]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.image.clone(),
                r.n_tokens.to_string(),
                r.fp.to_string(),
                r.gp.to_string(),
                r.ah.to_string(),
                format!("{}", r.total_ratio),
            ]
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&ImageStats) -> usize| {
        format!("{}", rows.iter().map(|r| f(r) as f64).sum::<f64>() / n)
    };
    out.push(vec![
        "mean".to_string(),
        avg(|r| r.n_tokens),
        avg(|r| r.fp),
        avg(|r| r.gp),
        avg(|r| r.ah),
        format!("{}", mean_ratio(rows)),
    ]);
    out
}
