//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward pass builds a fresh [`Tape`]; nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the chain rule. Values are immutable once recorded.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    conv3_accumulate, gelu_grad_scalar, gelu_scalar, gemm, softmax_rows, MatLayout, Scalar,
    Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target distribution for a softmax cross-entropy.
#[derive(Clone, Debug)]
pub enum Target<F> {
    /// One class index per row.
    Hard(Vec<usize>),
    /// Full probability rows, same shape as the logits.
    Soft(Vec<F>),
}

/// Geometry of a batched multi-head attention: `batch` sequences of `len`
/// positions stacked as rows, hidden width split into `heads` equal slices.
#[derive(Clone, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    /// Key validity per `[batch, len]`; `None` attends everywhere.
    pub key_mask: Option<Vec<bool>>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Affine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Standardize {
        x: Var,
        rstd: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    RowMean(Var),
    RowVar {
        x: Var,
        mean: Vec<F>,
    },
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    AttnProbs {
        q: Var,
        k: Var,
        shape: AttnShape,
        scale: F,
    },
    AttnContext {
        probs: Var,
        v: Var,
        shape: AttnShape,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv3 {
        x: Var,
        kernel: Var,
        bias: Var,
        batch: usize,
        len: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    SoftmaxXent {
        logits: Var,
        target: Target<F>,
        probs: Vec<F>,
    },
    KlDiv {
        pred: Var,
        target: Vec<F>,
        floor: F,
        norm: F,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn slice(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Moves the gradient buffer out; `None` when the node got no gradient.
    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads[v.0].take()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying its buffer.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Keep non-differentiable history out of the backward walk.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            self.data(a),
            MatLayout::dense(m, k),
            self.data(b),
            MatLayout::dense(k, n),
            F::zero(),
            &mut out,
            MatLayout::dense(m, n),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul_bt", a)?;
        let (n, k2) = self.mat_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            self.data(a),
            MatLayout::dense(m, k),
            self.data(b),
            MatLayout::dense(n, k).t(),
            F::zero(),
            &mut out,
            MatLayout::dense(m, n),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), &[a, b]))
    }

    /// Adds a `[n]` vector to every trailing-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += *bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x @ w + b` on `[rows, in]` inputs.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Mul(a, a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Sum of equally shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all needs at least one term".into()))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let n = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::shape(op, self.shape(x), self.shape(p)));
            }
        }
        Ok(n)
    }

    /// Elementwise `gamma * x + beta` along the trailing axis.
    pub fn affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.check_affine("nonorm", x, gamma, beta)?;
        let (g, b) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((o, gv), bv) in row.iter_mut().zip(&g).zip(&b) {
                *o = *o * *gv + *bv;
            }
        }
        Ok(self.push(out, Op::Affine { x, gamma, beta }, &[x, gamma, beta]))
    }

    fn standardize_rows(x: &[F], n: usize, eps: F) -> (Vec<F>, Vec<F>) {
        let inv_n = F::from_f64(1.0 / n as f64);
        let mut xhat = vec![F::zero(); x.len()];
        let mut rstd = Vec::with_capacity(x.len() / n);
        for (row, out) in x.chunks(n).zip(xhat.chunks_mut(n)) {
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let r = (var + eps).sqrt().recip();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        (xhat, rstd)
    }

    /// Per-row zero-mean unit-variance map (no affine parameters).
    pub fn standardize(&mut self, x: Var, eps: F) -> Var {
        let n = self.value(x).last_dim();
        let (xhat, rstd) = Self::standardize_rows(self.data(x), n, eps);
        let out = Tensor::from_parts(self.shape(x).to_vec(), xhat);
        self.push(out, Op::Standardize { x, rstd }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let n = self.check_affine("layer_norm", x, gamma, beta)?;
        let tracked = [x, gamma, beta].iter().any(|v| self.requires_grad(*v));
        let (xhat, rstd) = Self::standardize_rows(self.data(x), n, eps);
        let (g, b) = (self.data(gamma), self.data(beta));
        let (mut out, xhat) = if tracked {
            (xhat.clone(), xhat)
        } else {
            (xhat, Vec::new())
        };
        for row in out.chunks_mut(n) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * *gv + *bv;
            }
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Trailing-axis mean, shape `[rows]`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let inv = F::from_f64(1.0 / n as f64);
        let data: Vec<F> = self.data(x).chunks(n).map(|r| r.iter().copied().sum::<F>() * inv).collect();
        let rows = data.len();
        self.push(Tensor::from_parts(vec![rows], data), Op::RowMean(x), &[x])
    }

    /// Trailing-axis population variance, shape `[rows]`.
    pub fn row_var(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let inv = F::from_f64(1.0 / n as f64);
        let mut mean = Vec::new();
        let mut data = Vec::new();
        for r in self.data(x).chunks(n) {
            let m = r.iter().copied().sum::<F>() * inv;
            mean.push(m);
            data.push(r.iter().map(|&v| (v - m) * (v - m)).sum::<F>() * inv);
        }
        let rows = data.len();
        self.push(Tensor::from_parts(vec![rows], data), Op::RowVar { x, mean }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::Domain("softmax input contains non-finite values".into()));
        }
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        softmax_rows(out.data_mut(), n);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    fn head_layout(shape: &AttnShape, width: usize, b: usize, h: usize) -> MatLayout {
        let dh = width / shape.heads;
        MatLayout {
            offset: b * shape.len * width + h * dh,
            rows: shape.len,
            cols: dh,
            row_stride: width,
            col_stride: 1,
        }
    }

    fn check_attn(&self, op: &'static str, a: Var, b: Var, shape: &AttnShape) -> Result<usize> {
        self.same_shape(op, a, b)?;
        let (rows, width) = self.mat_dims(op, a)?;
        if rows != shape.batch * shape.len || width % shape.heads != 0 {
            return Err(Error::shape(
                op,
                self.shape(a),
                &[shape.batch, shape.len, shape.heads],
            ));
        }
        if let Some(mask) = &shape.key_mask {
            if mask.len() != rows {
                return Err(Error::shape(op, &[mask.len()], &[rows]));
            }
        }
        Ok(width)
    }

    /// Scaled dot-product attention distributions `[batch, heads, len, len]`.
    /// Masked keys receive exactly zero probability.
    pub fn attention_probs(&mut self, q: Var, k: Var, shape: AttnShape) -> Result<Var> {
        let width = self.check_attn("attention_probs", q, k, &shape)?;
        let (bs, t, nh) = (shape.batch, shape.len, shape.heads);
        let scale = F::from_f64(1.0 / ((width / nh) as f64).sqrt());
        let mut out = vec![F::zero(); bs * nh * t * t];
        for b in 0..bs {
            for h in 0..nh {
                let lq = Self::head_layout(&shape, width, b, h);
                gemm(
                    scale,
                    self.data(q),
                    lq,
                    self.data(k),
                    lq.t(),
                    F::zero(),
                    &mut out,
                    MatLayout::dense(t, t).at((b * nh + h) * t * t),
                );
            }
        }
        if let Some(mask) = &shape.key_mask {
            for (i, row) in out.chunks_mut(t).enumerate() {
                let b = i / (nh * t);
                for (j, v) in row.iter_mut().enumerate() {
                    if !mask[b * t + j] {
                        *v = F::neg_infinity();
                    }
                }
            }
        }
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("attention scores contain NaN".into()));
        }
        softmax_rows(&mut out, t);
        let value = Tensor::from_parts(vec![bs, nh, t, t], out);
        Ok(self.push(value, Op::AttnProbs { q, k, shape, scale }, &[q, k]))
    }

    /// Per-head `probs @ v`, heads concatenated back to `[batch * len, width]`.
    pub fn attention_context(&mut self, probs: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (rows, width) = self.mat_dims("attention_context", v)?;
        let (bs, t, nh) = (shape.batch, shape.len, shape.heads);
        if self.shape(probs) != [bs, nh, t, t] || rows != bs * t || width % nh != 0 {
            return Err(Error::shape("attention_context", self.shape(probs), self.shape(v)));
        }
        let mut out = vec![F::zero(); rows * width];
        for b in 0..bs {
            for h in 0..nh {
                let lv = Self::head_layout(&shape, width, b, h);
                gemm(
                    F::one(),
                    self.data(probs),
                    MatLayout::dense(t, t).at((b * nh + h) * t * t),
                    self.data(v),
                    lv,
                    F::zero(),
                    &mut out,
                    lv,
                );
            }
        }
        let value = Tensor::from_parts(vec![rows, width], out);
        Ok(self.push(value, Op::AttnContext { probs, v, shape }, &[probs, v]))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.mat_dims("gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                len: vocab,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_parts(vec![ids.len(), dim], out);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Kernel-3 same-length convolution over `batch` stacked sequences.
    pub fn conv3(&mut self, x: Var, kernel: Var, bias: Var, batch: usize, len: usize) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[0] != 3 {
            return Err(Error::Config(format!(
                "conv kernel must have shape [3, c_in, c_out], got {ks:?}"
            )));
        }
        let (c_in, c_out) = (ks[1], ks[2]);
        let (rows, cx) = self.mat_dims("conv3", x)?;
        if cx != c_in || rows != batch * len {
            return Err(Error::shape("conv3", self.shape(x), &ks));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv3 bias", self.shape(bias), &[c_out]));
        }
        let mut out: Vec<F> = self.data(bias).iter().copied().cycle().take(rows * c_out).collect();
        conv3_accumulate(self.data(x), self.data(kernel), &mut out, batch, len, c_in, c_out);
        let value = Tensor::from_parts(vec![rows, c_out], out);
        Ok(self.push(
            value,
            Op::Conv3 {
                x,
                kernel,
                bias,
                batch,
                len,
            },
            &[x, kernel, bias],
        ))
    }

    /// Picks rows of a 2-D node (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, dim) = self.mat_dims("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "row selection",
                index: bad,
                len: n,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            out.extend_from_slice(&src[r * dim..(r + 1) * dim]);
        }
        let value = Tensor::from_parts(vec![rows.len(), dim], out);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over rows of `-sum_j target_j * log softmax(logits)_j`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Target<F>) -> Result<Var> {
        let (rows, classes) = self.mat_dims("softmax_cross_entropy", logits)?;
        match &target {
            Target::Hard(labels) => {
                if labels.len() != rows {
                    return Err(Error::shape("softmax_cross_entropy", &[rows], &[labels.len()]));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                    return Err(Error::Index {
                        what: "class label",
                        index: bad,
                        len: classes,
                    });
                }
            }
            Target::Soft(p) => {
                if p.len() != rows * classes {
                    return Err(Error::shape("softmax_cross_entropy", &[rows, classes], &[p.len()]));
                }
            }
        }
        if !self.value(logits).is_finite() {
            return Err(Error::Domain("logits contain non-finite values".into()));
        }
        let x = self.data(logits);
        let mut probs = x.to_vec();
        softmax_rows(&mut probs, classes);
        let mut total = F::zero();
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            match &target {
                Target::Hard(labels) => total += lse - row[labels[r]],
                Target::Soft(p) => {
                    for (j, &v) in row.iter().enumerate() {
                        let pj = p[r * classes + j];
                        if pj != F::zero() {
                            total += pj * (lse - v);
                        }
                    }
                }
            }
        }
        let value = Tensor::scalar(total / F::from_f64(rows as f64));
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// `sum target * ln(max(target, floor) / max(pred, floor)) / norm` with a
    /// constant `target`.
    pub fn kl_div(&mut self, target: &[F], pred: Var, floor: F, norm: F) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(Error::shape("kl_div", &[target.len()], self.shape(pred)));
        }
        let total: F = target
            .iter()
            .zip(self.data(pred))
            .filter(|(&p, _)| p > F::zero())
            .map(|(&p, &q)| p * (p.max(floor).ln() - q.max(floor).ln()))
            .sum();
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            value,
            Op::KlDiv {
                pred,
                target: target.to_vec(),
                floor,
                norm,
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.value(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<F>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        // Gradient buffer for `v`, created on first touch; `None` when `v`
        // does not participate in differentiation.
        let slot = |grads: &mut [Option<Vec<F>>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![F::zero(); nodes[v.0].value.len()]);
            }
            true
        };
        macro_rules! buf {
            ($v:expr) => {
                grads[$v.0].as_mut().unwrap()
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let nn = nodes[b.0].value.shape()[1];
                if slot(grads, *a) {
                    gemm(F::one(), g, MatLayout::dense(m, nn), val(*b), MatLayout::dense(k, nn).t(), F::one(), buf!(a), MatLayout::dense(m, k));
                }
                if slot(grads, *b) {
                    gemm(F::one(), val(*a), MatLayout::dense(m, k).t(), g, MatLayout::dense(m, nn), F::one(), buf!(b), MatLayout::dense(k, nn));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let nn = nodes[b.0].value.shape()[0];
                if slot(grads, *a) {
                    gemm(F::one(), g, MatLayout::dense(m, nn), val(*b), MatLayout::dense(nn, k), F::one(), buf!(a), MatLayout::dense(m, k));
                }
                if slot(grads, *b) {
                    gemm(F::one(), g, MatLayout::dense(m, nn).t(), val(*a), MatLayout::dense(m, k), F::one(), buf!(b), MatLayout::dense(nn, k));
                }
            }
            Op::AddBias(x, bias) => {
                if slot(grads, *x) {
                    for (d, s) in buf!(x).iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                if slot(grads, *bias) {
                    let bg = buf!(bias);
                    let n = bg.len();
                    for row in g.chunks(n) {
                        for (d, s) in bg.iter_mut().zip(row) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                if slot(grads, *a) {
                    for (d, s) in buf!(a).iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                if slot(grads, *b) {
                    for (d, s) in buf!(b).iter_mut().zip(g) {
                        *d += sign * *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if slot(grads, *a) {
                    let other = val(*b);
                    for ((d, s), o) in buf!(a).iter_mut().zip(g).zip(other) {
                        *d += *s * *o;
                    }
                }
                if slot(grads, *b) {
                    let other = val(*a);
                    for ((d, s), o) in buf!(b).iter_mut().zip(g).zip(other) {
                        *d += *s * *o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if slot(grads, *a) {
                    for (d, s) in buf!(a).iter_mut().zip(g) {
                        *d += *s * *c;
                    }
                }
            }
            Op::Affine { x, gamma, beta } => {
                let gv = val(*gamma);
                let n = gv.len();
                if slot(grads, *x) {
                    let dx = buf!(x);
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, s), gm) in drow.iter_mut().zip(grow).zip(gv) {
                            *d += *s * *gm;
                        }
                    }
                }
                if slot(grads, *gamma) {
                    let xv = val(*x);
                    let dg = buf!(gamma);
                    for (xrow, grow) in xv.chunks(n).zip(g.chunks(n)) {
                        for ((d, s), xx) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += *s * *xx;
                        }
                    }
                }
                if slot(grads, *beta) {
                    let db = buf!(beta);
                    for grow in g.chunks(n) {
                        for (d, s) in db.iter_mut().zip(grow) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Standardize { x, rstd } => {
                if slot(grads, *x) {
                    let n = nodes[x.0].value.last_dim();
                    standardize_backward(out, g, rstd, n, None, buf!(x));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let n = gv.len();
                if slot(grads, *x) {
                    standardize_backward(xhat, g, rstd, n, Some(gv), buf!(x));
                }
                if slot(grads, *gamma) {
                    let dg = buf!(gamma);
                    for (xrow, grow) in xhat.chunks(n).zip(g.chunks(n)) {
                        for ((d, s), xx) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += *s * *xx;
                        }
                    }
                }
                if slot(grads, *beta) {
                    let db = buf!(beta);
                    for grow in g.chunks(n) {
                        for (d, s) in db.iter_mut().zip(grow) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::RowMean(x) => {
                if slot(grads, *x) {
                    let n = nodes[x.0].value.last_dim();
                    let inv = F::from_f64(1.0 / n as f64);
                    for (drow, s) in buf!(x).chunks_mut(n).zip(g) {
                        for d in drow {
                            *d += *s * inv;
                        }
                    }
                }
            }
            Op::RowVar { x, mean } => {
                if slot(grads, *x) {
                    let n = nodes[x.0].value.last_dim();
                    let c = F::from_f64(2.0 / n as f64);
                    let xv = val(*x);
                    for (((drow, xrow), s), m) in buf!(x).chunks_mut(n).zip(xv.chunks(n)).zip(g).zip(mean) {
                        for (d, xx) in drow.iter_mut().zip(xrow) {
                            *d += *s * c * (*xx - *m);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if slot(grads, *x) {
                    let xv = val(*x);
                    for ((d, s), xx) in buf!(x).iter_mut().zip(g).zip(xv) {
                        *d += *s * gelu_grad_scalar(*xx);
                    }
                }
            }
            Op::Relu(x) => {
                if slot(grads, *x) {
                    let xv = val(*x);
                    for ((d, s), xx) in buf!(x).iter_mut().zip(g).zip(xv) {
                        if *xx > F::zero() {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if slot(grads, *x) {
                    for ((d, s), y) in buf!(x).iter_mut().zip(g).zip(out) {
                        *d += *s * (F::one() - *y * *y);
                    }
                }
            }
            Op::Softmax(x) => {
                if slot(grads, *x) {
                    let n = node.value.last_dim();
                    softmax_backward(out, g, n, F::one(), buf!(x));
                }
            }
            Op::AttnProbs { q, k, shape, scale } => {
                let (bs, t, nh) = (shape.batch, shape.len, shape.heads);
                let width = nodes[q.0].value.shape()[1];
                let mut ds = vec![F::zero(); out.len()];
                softmax_backward(out, g, t, *scale, &mut ds);
                for b in 0..bs {
                    for h in 0..nh {
                        let lh = Self::head_layout(shape, width, b, h);
                        let ls = MatLayout::dense(t, t).at((b * nh + h) * t * t);
                        if slot(grads, *q) {
                            gemm(F::one(), &ds, ls, val(*k), lh, F::one(), buf!(q), lh);
                        }
                        if slot(grads, *k) {
                            gemm(F::one(), &ds, ls.t(), val(*q), lh, F::one(), buf!(k), lh);
                        }
                    }
                }
            }
            Op::AttnContext { probs, v, shape } => {
                let (bs, t, nh) = (shape.batch, shape.len, shape.heads);
                let width = nodes[v.0].value.shape()[1];
                for b in 0..bs {
                    for h in 0..nh {
                        let lh = Self::head_layout(shape, width, b, h);
                        let lp = MatLayout::dense(t, t).at((b * nh + h) * t * t);
                        if slot(grads, *probs) {
                            gemm(F::one(), g, lh, val(*v), lh.t(), F::one(), buf!(probs), lp);
                        }
                        if slot(grads, *v) {
                            gemm(F::one(), val(*probs), lp.t(), g, lh, F::one(), buf!(v), lh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if slot(grads, *table) {
                    let dim = nodes[table.0].value.shape()[1];
                    let dt = buf!(table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Conv3 {
                x,
                kernel,
                bias,
                batch,
                len,
            } => {
                let ks = nodes[kernel.0].value.shape();
                let (c_in, c_out) = (ks[1], ks[2]);
                for b in 0..*batch {
                    let base = b * len;
                    for tap in 0..3 {
                        let (dst0, src0, n) = match tap {
                            0 => (1, 0, len - 1),
                            1 => (0, 0, *len),
                            _ => (0, 1, len - 1),
                        };
                        if n == 0 {
                            continue;
                        }
                        let lx = MatLayout::dense(n, c_in).at((base + src0) * c_in);
                        let lk = MatLayout::dense(c_in, c_out).at(tap * c_in * c_out);
                        let lg = MatLayout::dense(n, c_out).at((base + dst0) * c_out);
                        if slot(grads, *x) {
                            gemm(F::one(), g, lg, val(*kernel), lk.t(), F::one(), buf!(x), lx);
                        }
                        if slot(grads, *kernel) {
                            gemm(F::one(), val(*x), lx.t(), g, lg, F::one(), buf!(kernel), lk);
                        }
                    }
                }
                if slot(grads, *bias) {
                    let db = buf!(bias);
                    for row in g.chunks(c_out) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if slot(grads, *x) {
                    let dim = nodes[x.0].value.last_dim();
                    let dx = buf!(x);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in dx[r * dim..(r + 1) * dim].iter_mut().zip(&g[i * dim..(i + 1) * dim]) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if slot(grads, *x) {
                    for ((d, s), m) in buf!(x).iter_mut().zip(g).zip(mask) {
                        *d += *s * *m;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            } => {
                if slot(grads, *logits) {
                    let classes = nodes[logits.0].value.last_dim();
                    let rows = probs.len() / classes;
                    let c = g[0] / F::from_f64(rows as f64);
                    let dl = buf!(logits);
                    for (i, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let t = match target {
                            Target::Hard(labels) => {
                                if labels[i / classes] == i % classes {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Target::Soft(tp) => tp[i],
                        };
                        *d += c * (*p - t);
                    }
                }
            }
            Op::KlDiv {
                pred,
                target,
                floor,
                norm,
            } => {
                if slot(grads, *pred) {
                    let c = g[0] / *norm;
                    let qv = val(*pred);
                    for ((d, p), q) in buf!(pred).iter_mut().zip(target).zip(qv) {
                        if *p > F::zero() && *q > *floor {
                            *d -= c * *p / *q;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if slot(grads, *x) {
                    for d in buf!(x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if slot(grads, *x) {
                    let dx = buf!(x);
                    let c = g[0] / F::from_f64(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += c;
                    }
                }
            }
        }
    }
}

/// `dx += scale * y * (dy - <dy, y>)` per row of a softmax output `y`.
fn softmax_backward<F: Scalar>(y: &[F], dy: &[F], n: usize, scale: F, dx: &mut [F]) {
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: F = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        for ((d, yy), gg) in dr.iter_mut().zip(yr).zip(gr) {
            *d += scale * *yy * (*gg - dot);
        }
    }
}

/// Backward of per-row standardization, optionally followed by a `gamma`
/// scale: `dx = rstd * (dxh - mean(dxh) - xhat * mean(dxh * xhat))`.
fn standardize_backward<F: Scalar>(
    xhat: &[F],
    dy: &[F],
    rstd: &[F],
    n: usize,
    gamma: Option<&[F]>,
    dx: &mut [F],
) {
    let inv_n = F::from_f64(1.0 / n as f64);
    let mut dxh = vec![F::zero(); n];
    for (((xr, gr), dr), &r) in xhat.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)).zip(rstd) {
        for j in 0..n {
            dxh[j] = match gamma {
                Some(gm) => gr[j] * gm[j],
                None => gr[j],
            };
        }
        let m1 = dxh.iter().copied().sum::<F>() * inv_n;
        let m2 = dxh.iter().zip(xr).map(|(a, b)| *a * *b).sum::<F>() * inv_n;
        for j in 0..n {
            dr[j] += r * (dxh[j] - m1 - xr[j] * m2);
        }
    }
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// `(input, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel error {:.3e} (tol {:.0e}) {}",
            self.op,
            self.max_rel_error,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        match self.worst {
            Some((i, j, a, n)) if !self.pass => write!(f, " at input {i}[{j}]: analytic {a:.6e}, numeric {n:.6e}"),
            _ => Ok(()),
        }
    }
}

/// Finite-difference gradient checker.
#[derive(Clone, Debug)]
pub struct GradChecker {
    pub tolerance: f64,
    pub step: f64,
    /// Check at most this many coordinates per input, chosen with a fixed
    /// stride; `None` checks every coordinate.
    pub max_coords: Option<usize>,
}

impl Default for GradChecker {
    fn default() -> Self {
        GradChecker {
            tolerance: 1e-4,
            step: 1e-5,
            max_coords: None,
        }
    }
}

impl GradChecker {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradChecker {
            tolerance,
            ..Default::default()
        }
    }

    pub fn check<Func>(&self, op: &str, f: Func, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            if tape.value(out).len() != 1 {
                return Err(Error::Contract(format!(
                    "gradient check of `{op}` needs a scalar output, got shape {:?}",
                    tape.shape(out)
                )));
            }
            Ok(tape.scalar(out))
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check of `{op}` needs a scalar output, got shape {:?}",
                tape.shape(out)
            )));
        }
        let grads = tape.backward(out)?;

        let mut worst = 0.0f64;
        let mut at = None;
        let mut work = inputs.to_vec();
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads
                .slice(*var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            let n = inputs[i].len();
            let stride = match self.max_coords {
                Some(m) if m < n => n.div_ceil(m),
                _ => 1,
            };
            for j in (0..n).step_by(stride) {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let rel = (a - numeric).abs() / denom;
                if rel > worst || at.is_none() {
                    worst = worst.max(rel);
                    at = Some((i, j, a, numeric));
                }
            }
        }
        Ok(GradCheckReport {
            op: op.to_string(),
            max_rel_error: worst,
            tolerance: self.tolerance,
            pass: worst <= self.tolerance,
            worst: at,
        })
    }
}

/// Checks every coordinate of every input at central-difference step 1e-5.
pub fn grad_check<Func>(op: &str, f: Func, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradChecker::with_tolerance(tolerance).check(op, f, inputs)
}
