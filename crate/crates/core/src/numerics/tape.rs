//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse accumulating vector-Jacobian products. Nodes
//! whose inputs are all constants are flagged and skipped during the reverse
//! sweep, so frozen branches cost nothing beyond their forward pass.

use super::tensor::{
    logsumexp, matmul_at_into, matmul_bt_into, matmul_into, softmax_in_place, Tensor,
    DEGENERATE_NORM,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeRows {
        x: Var,
        inv_norm: Vec<T>,
    },
    Pick(Var, Vec<(usize, usize)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Binds a tensor as a leaf; trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(true), Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("[{m}, {k}] x [{n}, {k2}]^T"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("row of {} for width {n}", self.value(row).len()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone().with_grad(false);
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of(GELU_C);
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let ng = self.ng(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        let ng = self.ng(&[a]);
        self.push(out, Op::Log(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::tensor::softmax_rows(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims2(a, "logsumexp_rows")?;
        let v = self.value(a);
        let out: Vec<T> = (0..m).map(|i| logsumexp(v.row(i))).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![m], out)?, Op::LogSumExp(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Mean(a), ng))
    }

    /// Row selection. The index list is a constant selector; gradients flow
    /// back to the selected rows only.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(idx)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.dims2(p, "concat_cols")?;
            if mi != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {m} vs {mi}"),
                ));
            }
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (mi, ni) = self.dims2(p, "concat_rows")?;
            if ni != n {
                return Err(Error::shape("concat_rows", format!("widths {n} vs {ni}")));
            }
            m += mi;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// ℓ2-normalizes each row; degenerate rows map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "normalize_rows")?;
        let v = self.value(a);
        let eps = T::of(DEGENERATE_NORM);
        let mut inv_norm = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let nr = super::tensor::norm(v.row(i));
            if nr >= eps {
                inv_norm[i] = T::one() / nr;
            }
            for j in 0..n {
                out[i * n + j] = v.row(i)[j] * inv_norm[i];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::NormalizeRows { x: a, inv_norm },
            ng,
        ))
    }

    /// Picks matrix entries into a vector.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims2(a, "pick")?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= m || j >= n {
                return Err(Error::shape(
                    "pick",
                    format!("({i}, {j}) outside [{m}, {n}]"),
                ));
            }
            out.push(v.at(i, j));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::new(vec![at.len()], out)?,
            Op::Pick(a, at.to_vec()),
            ng,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul")?;
                let (_, n) = self.dims2(*b, "matmul")?;
                if self.needs_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_bt_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accum(grads, *a, &da);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_at_into(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims2(*a, "matmul_bt")?;
                let (n, _) = self.dims2(*b, "matmul_bt")?;
                if self.needs_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accum(grads, *a, &da);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul_at_into(gd, self.value(*a).data(), &mut db, m, n, k);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose()?;
                self.accum(grads, *a, t.data());
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gd);
                self.accum(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gd);
                if self.needs_grad(*b) {
                    let neg: Vec<T> = gd.iter().map(|&x| -x).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let d: Vec<T> = gd
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accum(grads, *a, &d);
                }
                if self.needs_grad(*b) {
                    let d: Vec<T> = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accum(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<T> = gd.iter().map(|&x| x * *c).collect();
                self.accum(grads, *a, &d);
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, gd);
                if self.needs_grad(*row) {
                    let n = self.value(*row).len();
                    let mut d = vec![T::zero(); n];
                    for chunk in gd.chunks(n) {
                        for (o, &x) in d.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    self.accum(grads, *row, &d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims2(*x, "layer_norm")?;
                let gv = self.value(*gain).data();
                if self.needs_grad(*x) {
                    let nf = T::of(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gd[i * n + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = gd[i * n + j] * gv[j];
                            dx[i * n + j] = inv_std[i] * (dh - s1 / nf - xhat[i * n + j] * s2 / nf);
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.needs_grad(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.accum(grads, *gain, &dg);
                }
                if self.needs_grad(*bias) {
                    let mut db = vec![T::zero(); n];
                    for chunk in gd.chunks(n) {
                        for (o, &v) in db.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *bias, &db);
                }
            }
            Op::Gelu(a) => {
                let k = T::of((2.0 / std::f64::consts::PI).sqrt());
                let c = T::of(GELU_C);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let d: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * k * (T::one() + three * c * x * x);
                        gv * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                self.accum(grads, *a, &d);
            }
            Op::Exp(a) => {
                let d: Vec<T> = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| y * gv)
                    .collect();
                self.accum(grads, *a, &d);
            }
            Op::Log(a) => {
                let d: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| gv / x)
                    .collect();
                self.accum(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for (i, (yr, gr)) in y.chunks(n).zip(gd.chunks(n)).enumerate() {
                    let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::LogSumExp(a) => {
                let (m, n) = self.dims2(*a, "logsumexp_rows")?;
                let x = self.value(*a);
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let row = &mut d[i * n..(i + 1) * n];
                    row.copy_from_slice(x.row(i));
                    softmax_in_place(row);
                    for v in row.iter_mut() {
                        *v *= gd[i];
                    }
                }
                self.accum(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![gd[0]; self.value(*a).len()];
                self.accum(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let d = vec![gd[0] / T::of(n as f64); n];
                self.accum(grads, *a, &d);
            }
            Op::GatherRows(a, idx) => {
                if self.needs_grad(*a) {
                    let c = self.value(*a).cols();
                    let mut d = vec![T::zero(); self.value(*a).len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += gd[k * c + j];
                        }
                    }
                    self.accum(grads, *a, &d);
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims2(*a, "slice_cols")?;
                let len = node.value.cols();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accum(grads, *a, &d);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                        }
                        self.accum(grads, p, &d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accum(grads, p, &gd[off..off + len]);
                    off += len;
                }
            }
            Op::NormalizeRows { x, inv_norm } => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for (i, &inv) in inv_norm.iter().enumerate() {
                    if inv == T::zero() {
                        continue;
                    }
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * s) * inv;
                    }
                }
                self.accum(grads, *x, &d);
            }
            Op::Pick(a, at) => {
                if self.needs_grad(*a) {
                    let c = self.value(*a).cols();
                    let mut d = vec![T::zero(); self.value(*a).len()];
                    for (k, &(i, j)) in at.iter().enumerate() {
                        d[i * c + j] += gd[k];
                    }
                    self.accum(grads, *a, &d);
                }
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: &[T]) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (o, &x) in g.data_mut().iter_mut().zip(d) {
                    *o += x;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, d.to_vec()).expect("gradient shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[2, 2], 1.0));
        let b = tape.param(Tensor::full(&[2, 2], 2.0));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn matmul_gradient_is_ones_times_bt() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![5., 6.], vec![7., 8.]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // row sums of b
        assert_eq!(g.get(a).unwrap().data(), &[11., 15., 11., 15.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(a).is_err());
    }
}
