use super::layout::{position_code, TokenGrid};
use super::model::{check_pair, ModelState, Projection};
use super::types::{AttentionTrace, FeatureMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Which model tensors are bound as trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    /// Adapter factors only; base weights are constants.
    Adapters,
    /// Every base tensor (adapters too, if present).
    All,
}

struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// A model bound onto a tape, with adapter deltas folded into effective
/// projection weights.
pub struct ModelVars {
    patch_w: Var,
    patch_b: Var,
    pos_table: Var,
    blocks: Vec<BlockVars>,
    norm_g: Var,
    norm_b: Var,
    /// Adapter leaves in [`ModelState::adapter_tensors`] order.
    pub adapters: Vec<Var>,
    /// Base-weight leaves, for gradient-membership checks.
    pub base: Vec<Var>,
}

pub fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    trainable: Trainable,
) -> Result<ModelVars> {
    let base_grad = trainable == Trainable::All;
    let adapter_grad = trainable != Trainable::None;
    let mut base = Vec::new();
    let mut leaf = |tape: &mut Tape<T>, t: &Tensor<T>| {
        let v = tape.leaf(t.clone().with_grad(base_grad));
        base.push(v);
        v
    };
    let patch_w = leaf(tape, &model.patch_w);
    let patch_b = leaf(tape, &model.patch_b);
    let pos_bias = leaf(tape, &model.pos_bias);
    // one zero row past the table serves positions outside the image content
    let zero_row = tape.constant(Tensor::zeros(&[1, model.config.dim]));
    let pos_table = tape.concat_rows(&[pos_bias, zero_row])?;

    let mut blocks = Vec::with_capacity(model.blocks.len());
    let mut adapters = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let mut w =
            [b.wq.clone(), b.wk.clone(), b.wv.clone(), b.wo.clone()].map(|t| leaf(tape, &t));
        if let Some(ad) = &model.adapters {
            let blk = ad
                .blocks
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no adapters for block {i}")))?;
            let s = T::of(ad.config.scaling());
            for (slot, p) in w.iter_mut().zip(Projection::ALL) {
                let pair = blk.get(p);
                check_pair(pair, ad.config.rank, model.config.dim)?;
                let a = tape.leaf(pair.a.clone().with_grad(adapter_grad));
                let bb = tape.leaf(pair.b.clone().with_grad(adapter_grad));
                adapters.push(a);
                adapters.push(bb);
                let ba = tape.matmul(bb, a)?;
                let delta = tape.scale(ba, s);
                *slot = tape.add(*slot, delta)?;
            }
        }
        let [wq, wk, wv, wo] = w;
        blocks.push(BlockVars {
            ln1_g: leaf(tape, &b.ln1_g),
            ln1_b: leaf(tape, &b.ln1_b),
            wq,
            bq: leaf(tape, &b.bq),
            wk,
            bk: leaf(tape, &b.bk),
            wv,
            bv: leaf(tape, &b.bv),
            wo,
            bo: leaf(tape, &b.bo),
            ln2_g: leaf(tape, &b.ln2_g),
            ln2_b: leaf(tape, &b.ln2_b),
            w1: leaf(tape, &b.w1),
            b1: leaf(tape, &b.b1),
            w2: leaf(tape, &b.w2),
            b2: leaf(tape, &b.b2),
        });
    }
    let norm_g = leaf(tape, &model.norm_g);
    let norm_b = leaf(tape, &model.norm_b);
    Ok(ModelVars {
        patch_w,
        patch_b,
        pos_table,
        blocks,
        norm_g,
        norm_b,
        adapters,
        base,
    })
}

/// Rows of the position-bias table used by each grid token: content tokens
/// index the base table periodically, everything else hits the zero row.
fn pos_table_index(grid: &TokenGrid, base: usize) -> Vec<usize> {
    (0..grid.len())
        .map(|idx| {
            if grid.in_content(idx) {
                let (r, c) = grid.relative(idx);
                (r as usize % base) * base + (c as usize % base)
            } else {
                base * base
            }
        })
        .collect()
}

/// Runs the model on `image` laid out as `grid`; returns the final-layer
/// token matrix `[grid.len(), dim]` and, optionally, all attention maps.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    vars: &ModelVars,
    image: &Image<T>,
    grid: &TokenGrid,
    capture_attention: bool,
) -> Result<(Var, Option<AttentionTrace<T>>)> {
    let cfg = &model.config;
    let p = cfg.patch_size;
    if image.height() != grid.rows * p
        || image.width() != grid.cols * p
        || image.channels() != cfg.channels
    {
        return Err(Error::shape(
            "forward",
            format!(
                "{}x{}x{} image for a {}x{} grid at patch {p} with {} channels",
                image.height(),
                image.width(),
                image.channels(),
                grid.rows,
                grid.cols,
                cfg.channels
            ),
        ));
    }
    let patches = tape.constant(image.patches(p)?);
    let emb = tape.matmul(patches, vars.patch_w)?;
    let mut x = tape.add_row(emb, vars.patch_b)?;
    let pos = tape.constant(position_code(grid, cfg.grid(), cfg.dim, cfg.pos_scale));
    x = tape.add(x, pos)?;
    let bias = tape.gather_rows(vars.pos_table, &pos_table_index(grid, cfg.grid()))?;
    x = tape.add(x, bias)?;

    let eps = T::of(cfg.ln_eps);
    let dh = cfg.head_dim();
    let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
    let mut trace = Vec::new();
    for b in &vars.blocks {
        let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, eps)?;
        let q = tape.matmul(h, b.wq)?;
        let q = tape.add_row(q, b.bq)?;
        let k = tape.matmul(h, b.wk)?;
        let k = tape.add_row(k, b.bk)?;
        let v = tape.matmul(h, b.wv)?;
        let v = tape.add_row(v, b.bv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut maps = Vec::new();
        for hd in 0..cfg.heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, inv_sqrt);
            let a = tape.softmax_rows(s)?;
            if capture_attention {
                maps.push(tape.value(a).clone());
            }
            heads.push(tape.matmul(a, vh)?);
        }
        if capture_attention {
            trace.push(maps);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = tape.matmul(cat, b.wo)?;
        let o = tape.add_row(o, b.bo)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b, eps)?;
        let m = tape.matmul(h2, b.w1)?;
        let m = tape.add_row(m, b.b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, b.w2)?;
        let m = tape.add_row(m, b.b2)?;
        x = tape.add(x, m)?;
    }
    let out = tape.layer_norm(x, vars.norm_g, vars.norm_b, eps)?;
    let trace = if capture_attention {
        Some(AttentionTrace::new(trace)?)
    } else {
        None
    };
    Ok((out, trace))
}

/// Inference forward of a standalone image at any patch-aligned size.
pub fn forward<T: Scalar>(
    model: &ModelState<T>,
    image: &Image<T>,
    capture_attention: bool,
) -> Result<(FeatureMap<T>, Option<AttentionTrace<T>>)> {
    let p = model.config.patch_size;
    if p == 0 || !image.height().is_multiple_of(p) || !image.width().is_multiple_of(p) {
        return Err(Error::shape(
            "forward",
            format!(
                "{}x{} image is not divisible by patch size {p}",
                image.height(),
                image.width()
            ),
        ));
    }
    let grid = TokenGrid::plain(image.height() / p, image.width() / p);
    forward_grid(model, image, &grid, capture_attention)
}

pub fn forward_grid<T: Scalar>(
    model: &ModelState<T>,
    image: &Image<T>,
    grid: &TokenGrid,
    capture_attention: bool,
) -> Result<(FeatureMap<T>, Option<AttentionTrace<T>>)> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, model, Trainable::None)?;
    let (out, trace) = forward_on_tape(&mut tape, model, &vars, image, grid, capture_attention)?;
    let fm = FeatureMap::new(grid.rows, grid.cols, tape.value(out).clone())?;
    Ok((fm, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::vit::config::{AdapterConfig, ViTConfig};

    fn small() -> ViTConfig {
        ViTConfig {
            img_size: 32,
            patch_size: 8,
            dim: 16,
            depth: 2,
            heads: 2,
            ..ViTConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image<f64> {
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn shapes_of_output_and_trace() {
        let mut rng = Rng::new(1);
        let m = ModelState::<f64>::init(&small(), &mut rng).unwrap();
        let img = random_image(32, 32, &mut rng);
        let (fm, tr) = forward(&m, &img, true).unwrap();
        assert_eq!((fm.rows(), fm.cols(), fm.dim()), (4, 4, 16));
        let tr = tr.unwrap();
        assert_eq!((tr.num_layers(), tr.heads(), tr.tokens()), (2, 2, 16));
        let (err, nonneg) = tr.stochastic_error();
        assert!(err < 1e-12 && nonneg);
    }

    #[test]
    fn zero_image_zero_params_gives_identical_tokens() {
        let mut rng = Rng::new(2);
        let cfg = ViTConfig {
            pos_scale: 0.0,
            ..small()
        };
        let mut m = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let named: Vec<_> = m
            .named_tensors()
            .into_iter()
            .map(|(n, t)| {
                let keep = n.ends_with(".g");
                (n, if keep { t } else { Tensor::zeros(t.shape()) })
            })
            .collect();
        m = ModelState::from_named(cfg, None, named).unwrap();
        let (fm, _) = forward(&m, &Image::zeros(32, 32, 3), false).unwrap();
        for i in 1..fm.len() {
            assert_eq!(fm.token(i), fm.token(0));
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(3);
        let m = ModelState::<f64>::init(&small(), &mut rng).unwrap();
        let img = random_image(32, 32, &mut rng);
        let a = forward(&m, &img, true).unwrap();
        let b = forward(&m, &img, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extent_mismatch() {
        let mut rng = Rng::new(4);
        let m = ModelState::<f64>::init(&small(), &mut rng).unwrap();
        assert!(forward(&m, &Image::zeros(30, 32, 3), false).is_err());
        assert!(forward(&m, &Image::zeros(32, 32, 1), false).is_err());
    }

    #[test]
    fn zero_adapters_match_teacher() {
        let mut rng = Rng::new(5);
        let t = ModelState::<f64>::init(&small(), &mut rng).unwrap();
        let s = t
            .with_adapters(&AdapterConfig::default(), &mut rng)
            .unwrap();
        let img = random_image(32, 64, &mut rng);
        let (a, _) = forward(&t, &img, false).unwrap();
        let (b, _) = forward(&s, &img, false).unwrap();
        assert!(a.tokens().max_abs_diff(b.tokens()) <= 1e-12);
    }

    #[test]
    fn adapter_binding_keeps_base_out_of_the_gradient() {
        let mut rng = Rng::new(6);
        let t = ModelState::<f64>::init(&small(), &mut rng).unwrap();
        let s = t
            .with_adapters(&AdapterConfig::default(), &mut rng)
            .unwrap();
        let img = random_image(32, 32, &mut rng);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &s, Trainable::Adapters).unwrap();
        let (out, _) =
            forward_on_tape(&mut tape, &s, &vars, &img, &TokenGrid::plain(4, 4), false).unwrap();
        let loss = tape.sum(out);
        let g = tape.backward(loss).unwrap();
        assert!(vars.base.iter().all(|&v| g.get(v).is_none()));
        assert!(vars
            .adapters
            .iter()
            .skip(1)
            .step_by(2)
            .all(|&v| g.get(v).is_some()));
    }
}
