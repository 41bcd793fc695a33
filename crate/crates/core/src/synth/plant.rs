use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::composite_regions;
use crate::image::Axis;
use crate::numerics::{dot, softmax_rows, Rng, Tensor};
use crate::vit::{AttentionTrace, FeatureMap};

/// Separation guarantees of a planted benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Margins {
    /// Every plant has at least this cosine with its template.
    pub plant_cos: f64,
    /// Vectors of different classes have at most this cosine.
    pub background_cos: f64,
    /// Dead attention columns score at most this.
    pub dead_h: f64,
    /// Live attention columns score at least this.
    pub live_h: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            plant_cos: 0.95,
            background_cos: 0.3,
            dead_h: 0.01,
            live_h: 0.5,
        }
    }
}

/// Layout of a planted benchmark over a `rows × cols` grid. Index sets are
/// grid positions; `fp`, `gp` and `ah` must be disjoint. `reg` lists the
/// positions whose composite tokens are copied into the register set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub fp: Vec<usize>,
    pub gp: Vec<usize>,
    pub ah: Vec<usize>,
    pub reg: Vec<usize>,
    /// Register tokens unrelated to any map token.
    pub extra_registers: usize,
    pub margins: Margins,
}

/// Embedding width used for planted maps unless a spec says otherwise.
pub const PLANT_DIM: usize = 64;
const MAX_TRIES: usize = 10_000;
const LOGIT_STD: f64 = 0.5;
const DEAD_OFFSET: f64 = -1e6;

impl PlantSpec {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            dim: PLANT_DIM,
            fp: vec![],
            gp: vec![],
            ah: vec![],
            reg: vec![],
            extra_registers: 0,
            margins: Margins::default(),
        }
    }

    /// Random disjoint plants: 1–3 of each category on a `side × side` grid,
    /// two of the spurious positions mirrored into registers.
    pub fn random(side: usize, rng: &mut Rng) -> Self {
        let n = side * side;
        let (kf, kg, ka) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
        let idx = rng.sample_indices(n, kf + kg + ka);
        let mut fp = idx[..kf].to_vec();
        let mut gp = idx[kf..kf + kg].to_vec();
        let mut ah = idx[kf + kg..].to_vec();
        fp.sort_unstable();
        gp.sort_unstable();
        ah.sort_unstable();
        let mut reg = vec![fp[0], gp[0]];
        reg.sort_unstable();
        Self {
            fp,
            gp,
            ah,
            reg,
            extra_registers: 2,
            ..Self::empty(side, side)
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.dim < 2 {
            return Err(Error::invalid("planted grid needs tokens and dim >= 2"));
        }
        let mut seen = vec![false; n];
        for &i in self.fp.iter().chain(&self.gp).chain(&self.ah) {
            if i >= n {
                return Err(Error::invalid(format!(
                    "planted index {i} outside a {n}-token grid"
                )));
            }
            if seen[i] {
                return Err(Error::invalid(format!("planted index {i} used twice")));
            }
            seen[i] = true;
        }
        if let Some(&i) = self.reg.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "register source {i} outside the grid"
            )));
        }
        if self.ah.len() * 4 > n {
            return Err(Error::invalid(
                "at most a quarter of the grid can be dead attention columns",
            ));
        }
        let m = &self.margins;
        if !(0.0 < m.background_cos && m.background_cos < m.plant_cos && m.plant_cos < 1.0) {
            return Err(Error::invalid(
                "margins must satisfy 0 < background_cos < plant_cos < 1",
            ));
        }
        if !(0.0 <= m.dead_h && m.dead_h < m.live_h) {
            return Err(Error::invalid("margins must satisfy 0 <= dead_h < live_h"));
        }
        Ok(())
    }

    /// Cosine between a plant and its template: halfway between the plant
    /// margin and 1, so two copies of one template still have cosine
    /// `≥ 2c² − 1`.
    fn plant_alignment(&self) -> f64 {
        0.5 * (1.0 + self.margins.plant_cos)
    }
}

/// Ground-truth labels over grid positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantTruth {
    pub fp: Vec<usize>,
    pub gp: Vec<usize>,
    pub ah: Vec<usize>,
    /// Positions whose composite token matches a register.
    pub reg: Vec<usize>,
}

/// Planted standalone, reference and composite maps.
#[derive(Clone, Debug)]
pub struct PlantedMaps {
    pub z_s: FeatureMap<f64>,
    pub z_ref: FeatureMap<f64>,
    /// Horizontal composite: source half on the left.
    pub z_cat: FeatureMap<f64>,
    pub src_region: Vec<usize>,
    pub ref_region: Vec<usize>,
    pub registers: Tensor<f64>,
    pub truth: PlantTruth,
}

/// Pool of unit vectors with a per-vector class; new draws are rejected
/// until they clear the background margin against every other class.
struct Pool<'a> {
    rng: &'a mut Rng,
    dim: usize,
    bound: f64,
    vecs: Vec<(usize, Vec<f64>)>,
}

impl Pool<'_> {
    fn clears(&self, v: &[f64], class: usize) -> bool {
        self.vecs
            .iter()
            .all(|(c, u)| *c == class || dot(u, v) <= self.bound)
    }

    fn draw(&mut self, class: usize, around: Option<(&[f64], f64)>) -> Result<Vec<f64>> {
        for _ in 0..MAX_TRIES {
            let v = match around {
                None => self.rng.unit_vector(self.dim),
                Some((t, c)) => {
                    let n = self.rng.unit_vector(self.dim);
                    let p = dot(&n, t);
                    let perp: Vec<f64> = n.iter().zip(t).map(|(a, b)| a - p * b).collect();
                    let pn = crate::numerics::norm(&perp);
                    if pn < 1e-9 {
                        continue;
                    }
                    let s = (1.0 - c * c).sqrt();
                    t.iter()
                        .zip(&perp)
                        .map(|(a, b)| c * a + s * b / pn)
                        .collect()
                }
            };
            if self.clears(&v, class) {
                self.vecs.push((class, v.clone()));
                return Ok(v);
            }
        }
        Err(Error::invalid(format!(
            "margins unsatisfiable: no vector in dim {} keeps background cosine <= {}",
            self.dim, self.bound
        )))
    }
}

fn map_of(rows: usize, cols: usize, dim: usize, toks: Vec<Vec<f64>>) -> Result<FeatureMap<f64>> {
    let data: Vec<f64> = toks.into_iter().flatten().collect();
    FeatureMap::new(rows, cols, Tensor::new(vec![rows * cols, dim], data)?)
}

/// Builds planted maps: i.i.d. background unit vectors, FP plants as noisy
/// copies of per-position templates shared by `z_s`, `z_ref` and the
/// composite, and GP plants as noisy copies of one shared scene vector
/// present only in the composite (both halves).
pub fn plant_feature_maps(spec: &PlantSpec, rng: &mut Rng) -> Result<PlantedMaps> {
    spec.validate()?;
    let (n, d, c) = (spec.len(), spec.dim, spec.plant_alignment());
    let mut pool = Pool {
        rng,
        dim: d,
        bound: spec.margins.background_cos,
        vecs: Vec::new(),
    };
    // classes: 0.. background (each its own), n + k templates, 2n scene
    let mut next_bg = 0usize;
    let mut bg = |pool: &mut Pool| -> Result<Vec<f64>> {
        next_bg += 1;
        pool.draw(3 * n + next_bg, None)
    };
    let mut templates = vec![None; n];
    for &i in &spec.fp {
        templates[i] = Some(pool.draw(n + i, None)?);
    }
    let scene = pool.draw(2 * n, None)?;
    let mut z_s = Vec::with_capacity(n);
    let mut z_ref = Vec::with_capacity(n);
    let mut cat_src = Vec::with_capacity(n);
    let mut cat_ref = Vec::with_capacity(n);
    for i in 0..n {
        match &templates[i] {
            Some(t) => {
                let a = pool.draw(n + i, Some((t, c)))?;
                let b = pool.draw(n + i, Some((t, c)))?;
                z_s.push(a.clone());
                z_ref.push(b.clone());
                cat_src.push(a);
                cat_ref.push(b);
            }
            None => {
                let a = bg(&mut pool)?;
                let b = bg(&mut pool)?;
                z_s.push(a.clone());
                z_ref.push(b.clone());
                cat_src.push(a);
                cat_ref.push(b);
            }
        }
    }
    for &i in &spec.gp {
        cat_src[i] = pool.draw(2 * n, Some((&scene, c)))?;
        cat_ref[i] = pool.draw(2 * n, Some((&scene, c)))?;
    }
    let mut regs: Vec<Vec<f64>> = spec.reg.iter().map(|&i| cat_src[i].clone()).collect();
    for _ in 0..spec.extra_registers {
        regs.push(bg(&mut pool)?);
    }
    let (src_region, ref_region) = composite_regions_rect(spec.rows, spec.cols);
    let mut cat = vec![Vec::new(); 2 * n];
    for k in 0..n {
        cat[src_region[k]] = cat_src[k].clone();
        cat[ref_region[k]] = cat_ref[k].clone();
    }
    let registers = Tensor::new(vec![regs.len(), d], regs.into_iter().flatten().collect())?;
    Ok(PlantedMaps {
        z_s: map_of(spec.rows, spec.cols, d, z_s)?,
        z_ref: map_of(spec.rows, spec.cols, d, z_ref)?,
        z_cat: map_of(spec.rows, 2 * spec.cols, d, cat)?,
        src_region,
        ref_region,
        registers,
        truth: PlantTruth {
            fp: spec.fp.clone(),
            gp: spec.gp.clone(),
            ah: vec![],
            reg: register_truth(spec),
        },
    })
}

/// Mirrored positions plus every position sharing a template with one:
/// all GP plants as soon as any of them is mirrored.
fn register_truth(spec: &PlantSpec) -> Vec<usize> {
    let mut reg = spec.reg.clone();
    if spec.reg.iter().any(|i| spec.gp.contains(i)) {
        reg.extend(&spec.gp);
    }
    reg.sort_unstable();
    reg.dedup();
    reg
}

fn composite_regions_rect(rows: usize, cols: usize) -> (Vec<usize>, Vec<usize>) {
    if rows == cols {
        return composite_regions(rows, Axis::Horizontal);
    }
    let w = 2 * cols;
    let src = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| r * w + c))
        .collect();
    let rf = (0..rows)
        .flat_map(|r| (cols..w).map(move |c| r * w + c))
        .collect();
    (src, rf)
}

/// Random-logit attention over the planted grid with the `ah` key columns
/// pushed to `−10⁶` before the row softmax.
pub fn plant_attention(
    spec: &PlantSpec,
    layers: usize,
    heads: usize,
    rng: &mut Rng,
) -> Result<(AttentionTrace<f64>, Vec<usize>)> {
    spec.validate()?;
    if layers == 0 || heads == 0 {
        return Err(Error::invalid("planted trace needs layers and heads >= 1"));
    }
    let t = spec.len();
    let mut dead = vec![false; t];
    for &j in &spec.ah {
        dead[j] = true;
    }
    let all: Vec<usize> = (0..t).collect();
    for _ in 0..MAX_TRIES / 100 {
        let mut ls = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut hs = Vec::with_capacity(heads);
            for _ in 0..heads {
                let mut logits = Tensor::zeros(&[t, t]);
                for i in 0..t {
                    for j in 0..t {
                        let off = if dead[j] { DEAD_OFFSET } else { 0.0 };
                        logits.set(i, j, LOGIT_STD * rng.normal() + off);
                    }
                }
                hs.push(softmax_rows(&logits)?);
            }
            ls.push(hs);
        }
        let trace = AttentionTrace::new(ls)?;
        let h = crate::filter::hijack_scores(&trace, &all, &all)?;
        let ok = h.iter().all(|(j, s)| {
            if dead[j] {
                s <= spec.margins.dead_h
            } else {
                s >= spec.margins.live_h
            }
        });
        if ok {
            return Ok((trace, spec.ah.clone()));
        }
    }
    Err(Error::invalid(
        "could not draw an attention trace within the hijack margins",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    #[test]
    fn margins_hold() {
        let mut rng = Rng::new(11);
        let spec = PlantSpec {
            fp: vec![1, 5, 9],
            gp: vec![2],
            reg: vec![1],
            extra_registers: 1,
            ..PlantSpec::empty(4, 4)
        };
        let m = plant_feature_maps(&spec, &mut rng).unwrap();
        for &i in &spec.fp {
            assert!(
                cosine(m.z_s.token(i), m.z_ref.token(i)) >= 2.0 * 0.975f64.powi(2) - 1.0 - 1e-12
            );
        }
        for i in 0..16 {
            for j in 0..16 {
                if !(i == j && spec.fp.contains(&i)) {
                    assert!(cosine(m.z_s.token(i), m.z_ref.token(j)) <= 0.3 + 1e-12);
                }
            }
        }
        assert_eq!(m.registers.row(0), m.z_cat.token(m.src_region[1]));
    }

    #[test]
    fn bad_specs() {
        let mut rng = Rng::new(0);
        let overlap = PlantSpec {
            fp: vec![1],
            gp: vec![1],
            ..PlantSpec::empty(4, 4)
        };
        assert!(plant_feature_maps(&overlap, &mut rng).is_err());
        let tight = PlantSpec {
            dim: 2,
            fp: vec![0],
            ..PlantSpec::empty(4, 4)
        };
        assert!(plant_feature_maps(&tight, &mut rng).is_err());
    }

    #[test]
    fn planted_trace_is_stochastic() {
        let spec = PlantSpec {
            ah: vec![3],
            ..PlantSpec::empty(4, 4)
        };
        let (trace, dead) = plant_attention(&spec, 2, 2, &mut Rng::new(3)).unwrap();
        assert_eq!(dead, vec![3]);
        let (err, nonneg) = trace.stochastic_error();
        assert!(err <= 1e-12 && nonneg);
    }
}
