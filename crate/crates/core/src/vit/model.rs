use super::config::{AdapterConfig, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Base parameters of one pre-norm transformer block. Projections use the
/// `x · W` convention with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Low-rank pair contributing `scale · B · A` to a `dim × dim` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    /// `[rank, dim]`
    pub a: Tensor<T>,
    /// `[dim, rank]`
    pub b: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapters<T> {
    pub q: LoraPair<T>,
    pub k: LoraPair<T>,
    pub v: LoraPair<T>,
    pub o: LoraPair<T>,
}

impl<T> BlockAdapters<T> {
    pub fn get(&self, p: Projection) -> &LoraPair<T> {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::O => &self.o,
        }
    }

    pub fn get_mut(&mut self, p: Projection) -> &mut LoraPair<T> {
        match p {
            Projection::Q => &mut self.q,
            Projection::K => &mut self.k,
            Projection::V => &mut self.v,
            Projection::O => &mut self.o,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapters<T> {
    pub config: AdapterConfig,
    pub blocks: Vec<BlockAdapters<T>>,
}

/// Toy ViT parameters. A teacher has `adapters == None`; a student is a
/// copy with adapters attached.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ViTConfig,
    /// `[patch_dim, dim]`
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    /// Additive per-position table over the base token grid, `[grid², dim]`.
    pub pos_bias: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub adapters: Option<Adapters<T>>,
}

fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(std * rng.normal())).collect(),
    )
    .expect("shape")
}

/// Residual-branch output projections start scaled down so a random model
/// stays close to its patch embedding.
const RESIDUAL_INIT_GAIN: f64 = 0.5;

impl<T: Scalar> ModelState<T> {
    pub fn init(config: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.hidden();
        let pd = config.patch_dim();
        let g = config.grid();
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(Block {
                ln1_g: Tensor::full(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
                bq: Tensor::zeros(&[d]),
                wk: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
                bk: Tensor::zeros(&[d]),
                wv: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
                bv: Tensor::zeros(&[d]),
                wo: gaussian(&[d, d], RESIDUAL_INIT_GAIN / (d as f64).sqrt(), rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                w1: gaussian(&[d, h], 1.0 / (d as f64).sqrt(), rng),
                b1: Tensor::zeros(&[h]),
                w2: gaussian(&[h, d], RESIDUAL_INIT_GAIN / (h as f64).sqrt(), rng),
                b2: Tensor::zeros(&[d]),
            });
        }
        Ok(Self {
            config: config.clone(),
            patch_w: gaussian(&[pd, d], 1.0 / (pd as f64).sqrt(), rng),
            patch_b: Tensor::zeros(&[d]),
            pos_bias: Tensor::zeros(&[g * g, d]),
            blocks,
            norm_g: Tensor::full(&[d], T::one()),
            norm_b: Tensor::zeros(&[d]),
            adapters: None,
        })
    }

    /// Student copy with fresh adapters: `A` Gaussian, `B` zero.
    pub fn with_adapters(&self, cfg: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::invalid("adapter rank must be >= 1"));
        }
        let d = self.config.dim;
        let mut pair = || LoraPair {
            a: gaussian(&[cfg.rank, d], cfg.init_std, rng),
            b: Tensor::zeros(&[d, cfg.rank]),
        };
        let blocks = (0..self.config.depth)
            .map(|_| BlockAdapters {
                q: pair(),
                k: pair(),
                v: pair(),
                o: pair(),
            })
            .collect();
        let mut out = self.clone();
        out.adapters = Some(Adapters {
            config: cfg.clone(),
            blocks,
        });
        Ok(out)
    }

    /// Drops the adapters, keeping base weights.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        out.adapters = None;
        out
    }

    pub fn base_weight(&self, layer: usize, p: Projection) -> &Tensor<T> {
        let b = &self.blocks[layer];
        match p {
            Projection::Q => &b.wq,
            Projection::K => &b.wk,
            Projection::V => &b.wv,
            Projection::O => &b.wo,
        }
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.as_ref().map_or(0, |a| {
            a.blocks
                .iter()
                .map(|b| {
                    Projection::ALL
                        .iter()
                        .map(|&p| b.get(p).a.len() + b.get(p).b.len())
                        .sum::<usize>()
                })
                .sum()
        })
    }

    /// Adapter tensors in a fixed order: block-major, then Q, K, V, O, then
    /// `A` before `B`.
    pub fn adapter_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        if let Some(a) = &self.adapters {
            for b in &a.blocks {
                for p in Projection::ALL {
                    out.push(&b.get(p).a);
                    out.push(&b.get(p).b);
                }
            }
        }
        out
    }

    pub fn adapter_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.adapters {
            for b in &mut a.blocks {
                let BlockAdapters { q, k, v, o } = b;
                for pair in [q, k, v, o] {
                    out.push(&mut pair.a);
                    out.push(&mut pair.b);
                }
            }
        }
        out
    }

    /// Every tensor with its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("patch.w".to_string(), self.patch_w.clone()),
            ("patch.b".to_string(), self.patch_b.clone()),
            ("pos_bias".to_string(), self.pos_bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, &Tensor<T>); 16] = [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ];
            for (n, t) in fields {
                out.push((format!("blocks.{i}.{n}"), t.clone()));
            }
        }
        out.push(("norm.g".into(), self.norm_g.clone()));
        out.push(("norm.b".into(), self.norm_b.clone()));
        if let Some(a) = &self.adapters {
            for (i, b) in a.blocks.iter().enumerate() {
                for p in Projection::ALL {
                    out.push((format!("adapters.{i}.{}.a", p.name()), b.get(p).a.clone()));
                    out.push((format!("adapters.{i}.{}.b", p.name()), b.get(p).b.clone()));
                }
            }
        }
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors).
    pub fn from_named(
        config: ViTConfig,
        adapter_cfg: Option<AdapterConfig>,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            Ok(t)
        };
        let d = config.dim;
        let h = config.hidden();
        let g = config.grid();
        let patch_w = take("patch.w", &[config.patch_dim(), d])?;
        let patch_b = take("patch.b", &[d])?;
        let pos_bias = take("pos_bias", &[g * g, d])?;
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            let mut f = |n: &str, s: &[usize]| take(&format!("blocks.{i}.{n}"), s);
            blocks.push(Block {
                ln1_g: f("ln1.g", &[d])?,
                ln1_b: f("ln1.b", &[d])?,
                wq: f("wq", &[d, d])?,
                bq: f("bq", &[d])?,
                wk: f("wk", &[d, d])?,
                bk: f("bk", &[d])?,
                wv: f("wv", &[d, d])?,
                bv: f("bv", &[d])?,
                wo: f("wo", &[d, d])?,
                bo: f("bo", &[d])?,
                ln2_g: f("ln2.g", &[d])?,
                ln2_b: f("ln2.b", &[d])?,
                w1: f("mlp.w1", &[d, h])?,
                b1: f("mlp.b1", &[h])?,
                w2: f("mlp.w2", &[h, d])?,
                b2: f("mlp.b2", &[d])?,
            });
        }
        let norm_g = take("norm.g", &[d])?;
        let norm_b = take("norm.b", &[d])?;
        let adapters = match adapter_cfg {
            None => None,
            Some(cfg) => {
                let r = cfg.rank;
                let mut ab = Vec::new();
                for i in 0..config.depth {
                    let mut pair = |p: &str| -> Result<LoraPair<T>> {
                        Ok(LoraPair {
                            a: take(&format!("adapters.{i}.{p}.a"), &[r, d])?,
                            b: take(&format!("adapters.{i}.{p}.b"), &[d, r])?,
                        })
                    };
                    ab.push(BlockAdapters {
                        q: pair("q")?,
                        k: pair("k")?,
                        v: pair("v")?,
                        o: pair("o")?,
                    });
                }
                Some(Adapters {
                    config: cfg,
                    blocks: ab,
                })
            }
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::invalid(format!(
                "unexpected tensor `{extra}` in checkpoint"
            )));
        }
        Ok(Self {
            config,
            patch_w,
            patch_b,
            pos_bias,
            blocks,
            norm_g,
            norm_b,
            adapters,
        })
    }
}

/// Effective Q/K/V/O weights of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// `W_eff = W + (α/r)·B·A` for every adapted projection; base weights
/// are returned unchanged when the model has no adapters.
pub fn apply_adapters<T: Scalar>(model: &ModelState<T>) -> Result<Vec<EffectiveWeights<T>>> {
    let d = model.config.dim;
    let mut out = Vec::with_capacity(model.blocks.len());
    for (i, b) in model.blocks.iter().enumerate() {
        let mut eff = EffectiveWeights {
            wq: b.wq.clone(),
            wk: b.wk.clone(),
            wv: b.wv.clone(),
            wo: b.wo.clone(),
        };
        if let Some(ad) = &model.adapters {
            let s = T::of(ad.config.scaling());
            let blk = ad
                .blocks
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no adapters for block {i}")))?;
            for p in Projection::ALL {
                let pair = blk.get(p);
                check_pair(pair, ad.config.rank, d)?;
                let delta = pair.b.matmul(&pair.a)?.scale(s);
                let slot = match p {
                    Projection::Q => &mut eff.wq,
                    Projection::K => &mut eff.wk,
                    Projection::V => &mut eff.wv,
                    Projection::O => &mut eff.wo,
                };
                *slot = slot.add(&delta)?;
            }
        }
        out.push(eff);
    }
    Ok(out)
}

pub(crate) fn check_pair<T: Scalar>(pair: &LoraPair<T>, rank: usize, d: usize) -> Result<()> {
    if pair.a.shape() != [rank, d] || pair.b.shape() != [d, rank] {
        return Err(Error::shape(
            "adapter",
            format!(
                "rank {rank}: A {:?}, B {:?} for width {d}",
                pair.a.shape(),
                pair.b.shape()
            ),
        ));
    }
    Ok(())
}
