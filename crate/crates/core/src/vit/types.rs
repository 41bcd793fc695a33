use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// `rows × cols` grid of `dim`-wide token embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    rows: usize,
    cols: usize,
    tokens: Tensor<T>,
    /// Where the map came from, e.g. `"teacher:composite"`.
    pub tag: String,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(rows: usize, cols: usize, tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != rows * cols {
            return Err(Error::shape(
                "feature_map",
                format!("{rows}x{cols} grid with token tensor {:?}", tokens.shape()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            tokens,
            tag: String::new(),
        })
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[T] {
        self.tokens.row(i)
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor<T> {
        self.tokens
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    /// Tokens of the sub-grid `[r0, r0+h) × [c0, c0+w)`.
    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        if r0 + h > self.rows || c0 + w > self.cols {
            return Err(Error::shape(
                "window",
                format!("{h}x{w} at ({r0},{c0}) in {}x{}", self.rows, self.cols),
            ));
        }
        let idx: Vec<usize> = (r0..r0 + h)
            .flat_map(|r| (c0..c0 + w).map(move |c| r * self.cols + c))
            .collect();
        Ok(Self {
            rows: h,
            cols: w,
            tokens: self.tokens.gather_rows(&idx)?,
            tag: self.tag.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.is_finite()
    }
}

/// Raw per-layer, per-head attention matrices from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T> {
    layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn new(layers: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        let t = layers
            .first()
            .and_then(|l| l.first())
            .map(|m| m.rows())
            .ok_or_else(|| Error::invalid("empty attention trace"))?;
        let heads = layers[0].len();
        for l in &layers {
            if l.len() != heads {
                return Err(Error::shape(
                    "attention_trace",
                    "head count varies across layers",
                ));
            }
            for m in l {
                if m.shape() != [t, t] {
                    return Err(Error::shape(
                        "attention_trace",
                        format!("expected {t}x{t}, got {:?}", m.shape()),
                    ));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers[0].len()
    }

    pub fn tokens(&self) -> usize {
        self.layers[0][0].rows()
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &Tensor<T> {
        &self.layers[layer][head]
    }

    pub fn layers(&self) -> &[Vec<Tensor<T>>] {
        &self.layers
    }

    /// Head-averaged attention for one layer.
    pub fn head_average(&self, layer: usize) -> Tensor<T> {
        let heads = &self.layers[layer];
        let mut acc = Tensor::zeros(heads[0].shape());
        for m in heads {
            for (a, &v) in acc.data_mut().iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        acc.scale(T::one() / T::of(heads.len() as f64))
    }

    /// Largest deviation of any row sum from 1, and whether all entries are
    /// nonnegative.
    pub fn stochastic_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut nonneg = true;
        let t = self.tokens();
        for l in &self.layers {
            for m in l {
                for i in 0..t {
                    let row = m.row(i);
                    nonneg &= row.iter().all(|&v| v >= T::zero());
                    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        (worst, nonneg)
    }
}
