use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::RefineConfig;
use super::crops::sample_crops;
use super::losses::{loss_regular, loss_spurious, loss_uniformity};
use super::roi::roi_weights;
use crate::error::{Error, Result};
use crate::filter::training_filter;
use crate::image::Image;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::vit::{
    bind, forward_on_tape, inject_register_bias, make_register_layout, ModelState, Trainable,
};

/// Per-step loss bookkeeping; each term is averaged over crops and images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_regu: f64,
    pub l_spu: f64,
    pub l_uni: f64,
    pub total: f64,
    pub n_regular: usize,
    pub n_spurious: usize,
    pub seed: u64,
}

/// Loss value and adapter gradients of one batch.
pub struct Objective<T> {
    pub l_regu: f64,
    pub l_spu: f64,
    pub l_uni: f64,
    pub total: f64,
    pub n_regular: usize,
    pub n_spurious: usize,
    /// In [`ModelState::adapter_tensors`] order.
    pub grads: Vec<Tensor<T>>,
}

struct ItemResult<T> {
    parts: [f64; 3],
    n_regular: usize,
    n_spurious: usize,
    grads: Vec<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
fn item_objective<T: Scalar>(
    student: &ModelState<T>,
    teacher: &ModelState<T>,
    image: &Image<T>,
    reference: &Image<T>,
    cfg: &RefineConfig,
    use_registers: bool,
    batch_len: usize,
    mut rng: Rng,
) -> Result<ItemResult<T>> {
    let vc = &student.config;
    let g = vc.grid();
    let layout = make_register_layout(g, g, vc.register_factor)?;
    let padded = inject_register_bias(image, &layout, vc.patch_size, &mut rng)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, student, Trainable::Adapters)?;
    let (out, _) = forward_on_tape(
        &mut tape,
        student,
        &vars,
        &padded,
        &layout.token_grid(),
        false,
    )?;
    let z = tape.gather_rows(out, &layout.image_indices)?;
    let z_reg = tape.gather_rows(out, &layout.register_indices)?;
    let reg_values = use_registers.then(|| tape.value(z_reg).clone());

    let w = &cfg.weights;
    let crops = sample_crops(cfg.crops.n, &cfg.crops, (g, g), &mut rng);
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = [0.0; 3];
    let (mut n_regular, mut n_spurious) = (0, 0);
    for crop in &crops {
        let crop_img = image.crop_resize(crop.bx, vc.img_size, vc.img_size);
        let f = training_filter(
            teacher,
            &crop_img,
            reference,
            &cfg.thresholds,
            reg_values.as_ref(),
            &mut rng,
        )?;
        n_regular += f.partition.regular.len();
        n_spurious += f.partition.spurious.len();
        let wv = tape.constant(roi_weights(g, g, crop, cfg.crops.roi_samples)?);
        let z_roi = tape.matmul(wv, z)?;
        let zc = tape.constant(f.z_crop);
        if let Some(l) = loss_regular(&mut tape, z_roi, zc, &f.partition.regular, w.tau_nce)? {
            parts[0] += tape.value(l).item().as_f64();
            terms.push(l);
        }
        if w.lambda_spu > 0.0 {
            if let Some((l, _)) =
                loss_spurious(&mut tape, z_reg, zc, &f.partition.spurious, w.tau_nce)?
            {
                parts[1] += tape.value(l).item().as_f64();
                terms.push(tape.scale(l, T::of(w.lambda_spu)));
            }
        }
        if w.lambda_uni > 0.0 {
            let l = loss_uniformity(&mut tape, z_roi, z_reg, w.tau_uni)?;
            parts[2] += tape.value(l).item().as_f64();
            terms.push(tape.scale(l, T::of(w.lambda_uni)));
        }
    }
    let norm = 1.0 / (crops.len() * batch_len) as f64;
    for p in &mut parts {
        *p *= norm;
    }
    let grads = if terms.is_empty() {
        student
            .adapter_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    } else {
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let total = tape.scale(total, T::of(norm));
        let mut gr = tape.backward(total)?;
        vars.adapters
            .iter()
            .map(|&v| {
                gr.take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    };
    Ok(ItemResult {
        parts,
        n_regular,
        n_spurious,
        grads,
    })
}

/// Loss and adapter gradients over a batch; images run in parallel, each on
/// its own split of `rng`, and are reduced in batch order.
pub fn objective<T: Scalar>(
    student: &ModelState<T>,
    teacher: &ModelState<T>,
    batch: &[Image<T>],
    references: &[Image<T>],
    cfg: &RefineConfig,
    use_registers: bool,
    rng: &Rng,
) -> Result<Objective<T>> {
    if batch.is_empty() || batch.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} images with {} references",
            batch.len(),
            references.len()
        )));
    }
    if student.adapters.is_none() {
        return Err(Error::invalid("student has no adapters to train"));
    }
    let items: Vec<Result<ItemResult<T>>> = (0..batch.len())
        .into_par_iter()
        .map(|k| {
            item_objective(
                student,
                teacher,
                &batch[k],
                &references[k],
                cfg,
                use_registers,
                batch.len(),
                rng.split(k as u64),
            )
        })
        .collect();
    let mut parts = [0.0; 3];
    let (mut n_regular, mut n_spurious) = (0, 0);
    let mut grads: Vec<Tensor<T>> = student
        .adapter_tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for it in items {
        let it = it?;
        for (a, b) in parts.iter_mut().zip(it.parts) {
            *a += b;
        }
        n_regular += it.n_regular;
        n_spurious += it.n_spurious;
        for (acc, g) in grads.iter_mut().zip(&it.grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    let w = &cfg.weights;
    let total = parts[0] + w.lambda_spu * parts[1] + w.lambda_uni * parts[2];
    Ok(Objective {
        l_regu: parts[0],
        l_spu: parts[1],
        l_uni: parts[2],
        total,
        n_regular,
        n_spurious,
        grads,
    })
}

/// One optimizer update of the student's adapters.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    student: &mut ModelState<T>,
    teacher: &ModelState<T>,
    batch: &[Image<T>],
    references: &[Image<T>],
    cfg: &RefineConfig,
    opt: &mut Adam<T>,
    use_registers: bool,
    step: u64,
    rng: &Rng,
) -> Result<LossReport> {
    let obj = objective(student, teacher, batch, references, cfg, use_registers, rng)?;
    let finite = [obj.l_regu, obj.l_spu, obj.l_uni, obj.total]
        .iter()
        .all(|v| v.is_finite())
        && obj.grads.iter().all(|g| g.is_finite());
    if !finite {
        let diag = format!(
            "step {step} (seed {}): l_regu={} l_spu={} l_uni={} total={}, {} regular / {} spurious tokens, batch of {}",
            rng.seed(),
            obj.l_regu,
            obj.l_spu,
            obj.l_uni,
            obj.total,
            obj.n_regular,
            obj.n_spurious,
            batch.len()
        );
        log::error!("non-finite training objective: {diag}");
        return Err(Error::NonFinite(diag));
    }
    opt.step(student.adapter_tensors_mut(), &obj.grads)?;
    Ok(LossReport {
        step,
        l_regu: obj.l_regu,
        l_spu: obj.l_spu,
        l_uni: obj.l_uni,
        total: obj.total,
        n_regular: obj.n_regular,
        n_spurious: obj.n_spurious,
        seed: rng.seed(),
    })
}
