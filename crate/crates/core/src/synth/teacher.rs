use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;
use crate::vit::{position_code, ModelState, TokenGrid, ViTConfig};

/// Strength and coverage of the planted spurious behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    /// Fraction of base-grid positions whose output collapses onto the
    /// spurious direction.
    pub fp_fraction: f64,
    /// Fraction of positions whose keys are suppressed in every head.
    pub ah_fraction: f64,
    /// Size of the position marker written into the bias table.
    pub marker: f64,
    /// RMS column norm of the patch embedding.
    pub content_gain: f64,
    pub route_gain: f64,
    pub route_bias: f64,
    pub value_gain: f64,
    pub spurious_gain: f64,
    pub ah_gain: f64,
    pub ah_bias: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            fp_fraction: 0.25,
            ah_fraction: 0.0,
            marker: 6.0,
            content_gain: 6.0,
            route_gain: 4.0,
            route_bias: 2.0,
            value_gain: 1.0,
            spurious_gain: 32.0,
            ah_gain: 6.0,
            ah_bias: 6.0,
        }
    }
}

/// Everything the surgery writes, fixed up front so applying it is a pure
/// overwrite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    pub spec: TeacherSpec,
    /// Base-grid positions with the fixed-pattern marker.
    pub fp: Vec<usize>,
    /// Base-grid positions with suppressed keys.
    pub ah: Vec<usize>,
    pub fp_marker: Vec<f64>,
    pub ah_marker: Vec<f64>,
    /// Unit, zero-mean direction that marked outputs collapse onto.
    pub spurious_dir: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SpuriousTeacher<T> {
    pub model: ModelState<T>,
    pub plan: SurgeryPlan,
}

fn pair_marker(dim: usize, a: usize, b: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    m[a] = std::f64::consts::FRAC_1_SQRT_2;
    m[b] = -std::f64::consts::FRAC_1_SQRT_2;
    m
}

pub fn plan_surgery(config: &ViTConfig, spec: &TeacherSpec, rng: &mut Rng) -> Result<SurgeryPlan> {
    config.validate()?;
    let d = config.dim;
    let n = config.grid() * config.grid();
    if !(0.0..=1.0).contains(&spec.fp_fraction) || !(0.0..=1.0).contains(&spec.ah_fraction) {
        return Err(Error::invalid("plant fractions must lie in [0, 1]"));
    }
    if d < 8 || config.head_dim() < 2 {
        return Err(Error::invalid("surgery needs dim >= 8 and head_dim >= 2"));
    }
    let kf = (spec.fp_fraction * n as f64).round() as usize;
    let ka = (spec.ah_fraction * n as f64).round() as usize;
    if kf + ka > n {
        return Err(Error::invalid(
            "fixed-pattern and hijack plants exceed the grid",
        ));
    }
    let idx = rng.sample_indices(n, kf + ka);
    let mut fp = idx[..kf].to_vec();
    let mut ah = idx[kf..].to_vec();
    fp.sort_unstable();
    ah.sort_unstable();
    let fp_marker = pair_marker(d, d - 1, d - 2);
    let ah_marker = pair_marker(d, d - 3, d - 4);
    let mut s: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    for m in [&fp_marker, &ah_marker] {
        let p: f64 = s.iter().zip(m).map(|(a, b)| a * b).sum();
        s.iter_mut().zip(m).for_each(|(a, b)| *a -= p * b);
    }
    let mean = s.iter().sum::<f64>() / d as f64;
    s.iter_mut().for_each(|a| *a -= mean);
    let norm = s.iter().map(|a| a * a).sum::<f64>().sqrt();
    s.iter_mut().for_each(|a| *a /= norm);
    Ok(SurgeryPlan {
        spec: spec.clone(),
        fp,
        ah,
        fp_marker,
        ah_marker,
        spurious_dir: s,
    })
}

fn set_component<T: Scalar>(row: &mut [T], dir: &[f64], value: f64) {
    let p: f64 = row.iter().zip(dir).map(|(a, b)| a.as_f64() * b).sum();
    if (value - p).abs() <= 1e-12 {
        return;
    }
    for (a, b) in row.iter_mut().zip(dir) {
        *a = T::of(a.as_f64() + (value - p) * b);
    }
}

fn set_col<T: Scalar>(w: &mut Tensor<T>, col: usize, v: &[f64]) {
    for (i, &x) in v.iter().enumerate() {
        w.set(i, col, T::of(x));
    }
}

/// Replaces `old` by `new` unless they already agree to rounding, which
/// keeps repeated surgery bit-identical.
fn settle<T: Scalar>(old: &mut Tensor<T>, new: Tensor<T>) {
    let scale = old
        .data()
        .iter()
        .fold(1.0f64, |m, v| m.max(v.as_f64().abs()));
    if old.shape() != new.shape() || old.max_abs_diff(&new).as_f64() > 1e-12 * scale {
        *old = new;
    }
}

/// Removes the span of the (orthonormal) `dirs` from every row.
fn project_rows<T: Scalar>(w: &Tensor<T>, dirs: &[&[f64]]) -> Tensor<T> {
    let mut out = w.clone();
    let cols = w.shape()[w.shape().len() - 1];
    for r in 0..out.len() / cols {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for d in dirs {
            set_component(row, d, 0.0);
        }
    }
    out
}

/// Patch embedding blind to each patch's per-channel planar fit (mean and
/// both ramps), rescaled to a fixed Frobenius norm, with no component along
/// the markers.
fn content_embedding<T: Scalar>(
    w: &Tensor<T>,
    patch: usize,
    channels: usize,
    gain: f64,
    dirs: &[&[f64]],
) -> Tensor<T> {
    let (pd, d) = (w.rows(), w.cols());
    let mid = (patch as f64 - 1.0) / 2.0;
    let mut basis: Vec<Vec<f64>> = vec![
        vec![1.0; patch * patch],
        (0..patch * patch)
            .map(|k| (k % patch) as f64 - mid)
            .collect(),
        (0..patch * patch)
            .map(|k| (k / patch) as f64 - mid)
            .collect(),
    ];
    for b in &mut basis {
        let n = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        b.iter_mut().for_each(|v| *v /= n);
    }
    let mut out = w.clone();
    for j in 0..d {
        for c in 0..channels {
            let idx: Vec<usize> = (c..pd).step_by(channels).collect();
            for b in &basis {
                let p: f64 = idx
                    .iter()
                    .zip(b)
                    .map(|(&i, &bv)| out.at(i, j).as_f64() * bv)
                    .sum();
                for (&i, &bv) in idx.iter().zip(b) {
                    out.set(i, j, T::of(out.at(i, j).as_f64() - p * bv));
                }
            }
        }
    }
    let mut out = project_rows(&out, dirs);
    let fro = out
        .data()
        .iter()
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if fro > 0.0 {
        let k = gain * (d as f64).sqrt() / fro;
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::of(v.as_f64() * k));
    }
    out
}

/// Overwrites the planned parameters:
///
/// * content: the patch embedding only sees texture around each patch's
///   planar trend, at a gain that dominates the position terms.
/// * markers: residual writers never touch the marker directions, and the
///   bias table cancels the position code along them, so a base-grid token
///   carries exactly `marker` on its own marker and nothing on the others.
/// * fixed pattern: in the last block, head 0 coordinate 0 sends marked
///   queries to marked keys (unmarked queries avoid them through a
///   negative query bias), and the routed value is written out along the
///   spurious direction.
/// * hijack (when planted): coordinate 1 of every head in every block
///   gives all queries a constant negative score against marked keys.
pub fn apply_surgery<T: Scalar>(
    model: &ModelState<T>,
    plan: &SurgeryPlan,
) -> Result<ModelState<T>> {
    let cfg = &model.config;
    let (d, dh) = (cfg.dim, cfg.head_dim());
    if plan.fp_marker.len() != d || plan.spurious_dir.len() != d {
        return Err(Error::shape(
            "apply_surgery",
            "plan was made for another width",
        ));
    }
    let sp = &plan.spec;
    let mut out = model.clone();
    let g = cfg.grid();
    let n = g * g;
    let dirs: [&[f64]; 2] = [&plan.fp_marker, &plan.ah_marker];

    let emb = content_embedding(
        &out.patch_w,
        cfg.patch_size,
        cfg.channels,
        sp.content_gain,
        &dirs,
    );
    settle(&mut out.patch_w, emb);
    let pb = project_rows(&out.patch_b, &dirs);
    settle(&mut out.patch_b, pb);

    let mut is_fp = vec![false; n];
    let mut is_ah = vec![false; n];
    for &i in &plan.fp {
        is_fp[i] = true;
    }
    for &i in &plan.ah {
        is_ah[i] = true;
    }
    let pc = position_code::<f64>(&TokenGrid::plain(g, g), g, d, cfg.pos_scale);
    let along = |p: usize, m: &[f64]| pc.row(p).iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
    for p in 0..n {
        let fp_target = if is_fp[p] { sp.marker } else { 0.0 } - along(p, &plan.fp_marker);
        let ah_target = if is_ah[p] { sp.marker } else { 0.0 } - along(p, &plan.ah_marker);
        let row = out.pos_bias.row_mut(p);
        set_component(row, &plan.fp_marker, fp_target);
        set_component(row, &plan.ah_marker, ah_target);
    }

    for b in out.blocks.iter_mut() {
        for w in [&mut b.wo, &mut b.bo, &mut b.w2, &mut b.b2] {
            let p = project_rows(w, &dirs);
            settle(w, p);
        }
    }

    let zeros = vec![0.0; d];
    if !plan.ah.is_empty() {
        let ah_key: Vec<f64> = plan.ah_marker.iter().map(|v| -sp.ah_gain * v).collect();
        for b in out.blocks.iter_mut() {
            for h in 0..cfg.heads {
                let c = h * dh + 1;
                set_col(&mut b.wq, c, &zeros);
                b.bq.data_mut()[c] = T::of(sp.ah_bias);
                set_col(&mut b.wk, c, &ah_key);
                b.bk.data_mut()[c] = T::zero();
            }
        }
    }
    let last = out
        .blocks
        .last_mut()
        .ok_or_else(|| Error::invalid("model has no blocks"))?;
    let route: Vec<f64> = plan.fp_marker.iter().map(|v| sp.route_gain * v).collect();
    let value: Vec<f64> = plan.fp_marker.iter().map(|v| sp.value_gain * v).collect();
    set_col(&mut last.wq, 0, &route);
    last.bq.data_mut()[0] = T::of(-sp.route_bias);
    set_col(&mut last.wk, 0, &route);
    last.bk.data_mut()[0] = T::zero();
    let first_free = if plan.ah.is_empty() { 1 } else { 2 };
    for c in first_free..dh {
        set_col(&mut last.wq, c, &zeros);
        set_col(&mut last.wk, c, &zeros);
        last.bq.data_mut()[c] = T::zero();
        last.bk.data_mut()[c] = T::zero();
    }
    set_col(&mut last.wv, 0, &value);
    last.bv.data_mut()[0] = T::zero();
    for (j, &v) in plan.spurious_dir.iter().enumerate() {
        last.wo.set(0, j, T::of(sp.spurious_gain * v));
    }
    Ok(out)
}

/// Random toy teacher followed by the planted surgery.
pub fn make_spurious_teacher<T: Scalar>(
    config: &ViTConfig,
    spec: &TeacherSpec,
    rng: &mut Rng,
) -> Result<SpuriousTeacher<T>> {
    let mut init_rng = rng.split(0);
    let mut plan_rng = rng.split(1);
    let base = ModelState::init(config, &mut init_rng)?;
    let plan = plan_surgery(config, spec, &mut plan_rng)?;
    let model = apply_surgery(&base, &plan)?;
    Ok(SpuriousTeacher { model, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surgery_is_idempotent_and_sized() {
        let cfg = ViTConfig::default();
        let spec = TeacherSpec {
            ah_fraction: 0.0625,
            ..Default::default()
        };
        let t = make_spurious_teacher::<f64>(&cfg, &spec, &mut Rng::new(9)).unwrap();
        assert_eq!(t.plan.fp.len(), 16);
        assert_eq!(t.plan.ah.len(), 4);
        assert!(t.plan.fp.iter().all(|i| !t.plan.ah.contains(i)));
        assert_eq!(apply_surgery(&t.model, &t.plan).unwrap(), t.model);
        let s = &t.plan.spurious_dir;
        assert!((s.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().sum::<f64>().abs() < 1e-12);
    }
}
