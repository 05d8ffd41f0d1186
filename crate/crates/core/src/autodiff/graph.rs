//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, so a single reverse sweep
//! over the node list visits them in a valid topological order.

use std::rc::Rc;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    GatherRows { table: Var, indices: Rc<Vec<usize>> },
    Reshape(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    Mean(Var),
    MaskedSoftmax { src: Var, mask: Rc<Vec<bool>> },
    PairScores { q: Var, bb: Var, pairs: Rc<Vec<(usize, usize)>> },
    SmoothL1(Var),
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-writer computation graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(GELU_COEF) * x * x * x)).tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let t = (c * (x + T::lit(GELU_COEF) * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0 * GELU_COEF) * x * x)
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU on a single value.
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_scalar(x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    sigmoid_scalar(x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Inserts a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() > 2 {
            return Err(Error::shape(op, shape, &[]));
        }
        Ok(self.dims(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul", a)?;
        let (k2, n) = self.check_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("transpose", a)?;
        let out = transpose_raw(self.data(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `a[r, :] + row` for every row `r`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("add_row", a)?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let b = self.data(row);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + b[idx % n])
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, row), rg))
    }

    /// `a[r, :] * col[r]` for every row `r`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("mul_col", a)?;
        if self.value(col).len() != m {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.data(col);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * c[idx / n])
            .collect();
        let rg = self.rg(&[a, col]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(a, col), rg))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Axis { axis, rank: 2 });
        }
        let first = *parts
            .first()
            .ok_or_else(|| Error::Data("concat of zero tensors".into()))?;
        let (r0, c0) = self.check_matrix("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.check_matrix("concat", p)?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            dims.push((r, c));
        }
        let (out_shape, out) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data: Vec<T> = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
            (vec![rows, c0], data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
                }
            }
            (vec![r0, cols], data)
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Axis { axis, rank: 2 });
        }
        let (r, c) = self.check_matrix("slice", a)?;
        let extent = if axis == 0 { r } else { c };
        if len == 0 || start + len > extent {
            return Err(Error::Index {
                index: start + len,
                rows: extent,
            });
        }
        let src = self.data(a);
        let (shape, out) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * len);
            for row in 0..r {
                out.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            (vec![r, len], out)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { src: a, axis, start }, rg))
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, c) = self.check_matrix("embedding_lookup", table)?;
        if indices.is_empty() {
            return Err(Error::Data("embedding lookup with no indices".into()));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index { index: i, rows });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], out)?,
            Op::GatherRows {
                table,
                indices: Rc::new(indices.to_vec()),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid_scalar);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.check_matrix("layer_norm", x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let nf = T::from_usize(n).unwrap_or_else(T::one);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(g[c] * xh + b[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap_or_else(T::one);
        let s = self.data(a).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise softmax restricted to entries where `mask` is true.
    ///
    /// Masked-out entries are excluded from the normalizer and come out as
    /// exactly zero; their scores are never read.
    pub fn masked_softmax(&mut self, scores: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.check_matrix("masked_softmax", scores)?;
        if mask.len() != m * n {
            return Err(Error::shape("masked_softmax", self.shape(scores), &[mask.len()]));
        }
        let out = masked_softmax_rows(self.data(scores), &mask, m, n)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MaskedSoftmax { src: scores, mask },
            rg,
        ))
    }

    /// `out[i, j] = q[i] · bb[p]` for each listed pair `p = (i, j)`; zero
    /// elsewhere. Output is `[n × n]` with `n` the row count of `q`.
    pub fn pair_scores(&mut self, q: Var, bb: Var, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let (n, dq) = self.check_matrix("pair_scores", q)?;
        let (p, db) = self.check_matrix("pair_scores", bb)?;
        if dq != db || p != pairs.len() {
            return Err(Error::shape("pair_scores", self.shape(q), self.shape(bb)));
        }
        let qd = self.data(q);
        let bd = self.data(bb);
        let mut out = vec![T::zero(); n * n];
        for (idx, &(i, j)) in pairs.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::Index { index: i.max(j), rows: n });
            }
            out[i * n + j] = qd[i * dq..(i + 1) * dq]
                .iter()
                .zip(&bd[idx * dq..(idx + 1) * dq])
                .map(|(&a, &b)| a * b)
                .sum();
        }
        let rg = self.rg(&[q, bb]);
        Ok(self.push(Tensor::new(vec![n, n], out)?, Op::PairScores { q, bb, pairs }, rg))
    }

    /// Mean smooth-L1 (beta = 1) over all components.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let v = smooth_l1_mean(self.data(x));
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::SmoothL1(x), rg)
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.check_matrix("cross_entropy", logits)?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let src = self.data(logits);
        let mut probs = Vec::with_capacity(m * c);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index { index: label, rows: c });
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
        }
        let mf = T::from_usize(m).unwrap_or_else(T::one);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / mf),
            Op::CrossEntropy {
                logits,
                labels: Rc::new(labels.to_vec()),
                probs,
            },
            rg,
        ))
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        contrib(slot);
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.data(*b), k, n);
                    let da = matmul_raw(gout, &bt, m, n, k);
                    self.accumulate(grads, *a, |g| add_into(g, &da));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.data(*a), m, k);
                    let db = matmul_raw(&at, gout, k, m, n);
                    self.accumulate(grads, *b, |g| add_into(g, &db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let back = transpose_raw(gout, c, r);
                self.accumulate(grads, *a, |g| add_into(g, &back));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| {
                    for (x, &d) in g.iter_mut().zip(gout) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gout).zip(bv) {
                        *x += d * o;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gout).zip(av) {
                        *x += d * o;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |g| {
                    for (x, &d) in g.iter_mut().zip(gout) {
                        *x += d * c;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                let n = self.value(*row).len();
                self.accumulate(grads, *row, |g| {
                    for (i, &d) in gout.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (_, n) = self.dims(*a);
                let (av, cv) = (self.data(*a), self.data(*col));
                self.accumulate(grads, *a, |g| {
                    for (i, (x, &d)) in g.iter_mut().zip(gout).enumerate() {
                        *x += d * cv[i / n];
                    }
                });
                self.accumulate(grads, *col, |g| {
                    for (i, (&d, &x)) in gout.iter().zip(av).enumerate() {
                        g[i / n] += d * x;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if *axis == 0 {
                        let chunk = &gout[offset * cols..(offset + r) * cols];
                        self.accumulate(grads, p, |g| add_into(g, chunk));
                        offset += r;
                    } else {
                        let start = offset;
                        self.accumulate(grads, p, |g| {
                            for row in 0..rows {
                                for j in 0..c {
                                    g[row * c + j] += gout[row * cols + start + j];
                                }
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (_, c) = self.dims(*src);
                let (r_out, c_out) = node.value.dims2();
                let start = *start;
                let axis = *axis;
                self.accumulate(grads, *src, |g| {
                    if axis == 0 {
                        for (x, &d) in g[start * c..(start + r_out) * c].iter_mut().zip(gout) {
                            *x += d;
                        }
                    } else {
                        for row in 0..r_out {
                            for j in 0..c_out {
                                g[row * c + start + j] += gout[row * c_out + j];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let (_, c) = self.dims(*table);
                self.accumulate(grads, *table, |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[r * c + j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |g| {
                    for ((x, &d), &s) in g.iter_mut().zip(gout).zip(y) {
                        *x += d * s * (T::one() - s);
                    }
                });
            }
            Op::Gelu(a) => {
                let src = self.data(*a);
                self.accumulate(grads, *a, |g| {
                    for ((x, &d), &v) in g.iter_mut().zip(gout).zip(src) {
                        *x += d * gelu_derivative(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let nf = T::from_usize(n).unwrap_or_else(T::one);
                let gv = self.data(*gamma);
                self.accumulate(grads, *gamma, |g| {
                    for (i, &d) in gout.iter().enumerate() {
                        g[i % n] += d * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |g| {
                    for (i, &d) in gout.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for r in 0..m {
                        let base = r * n;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..n {
                            let dxh = gout[base + c] * gv[c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[base + c];
                        }
                        for c in 0..n {
                            let dxh = gout[base + c] * gv[c];
                            g[base + c] +=
                                inv_std[r] / nf * (nf * dxh - sum_d - xhat[base + c] * sum_dx);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = gout[0];
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap_or_else(T::one);
                let d = gout[0] / n;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|x| *x += d));
            }
            Op::MaskedSoftmax { src, mask } => {
                let (m, n) = self.dims(*src);
                let y = node.value.data();
                self.accumulate(grads, *src, |g| {
                    for r in 0..m {
                        let base = r * n;
                        let dot: T = (0..n)
                            .filter(|&c| mask[base + c])
                            .map(|c| y[base + c] * gout[base + c])
                            .sum();
                        for c in 0..n {
                            if mask[base + c] {
                                g[base + c] += y[base + c] * (gout[base + c] - dot);
                            }
                        }
                    }
                });
            }
            Op::PairScores { q, bb, pairs } => {
                let (n, dq) = self.dims(*q);
                let (qd, bd) = (self.data(*q), self.data(*bb));
                self.accumulate(grads, *q, |g| {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let d = gout[i * n + j];
                        for c in 0..dq {
                            g[i * dq + c] += d * bd[p * dq + c];
                        }
                    }
                });
                self.accumulate(grads, *bb, |g| {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let d = gout[i * n + j];
                        for c in 0..dq {
                            g[p * dq + c] += d * qd[i * dq + c];
                        }
                    }
                });
            }
            Op::SmoothL1(a) => {
                let src = self.data(*a);
                let n = T::from_usize(src.len()).unwrap_or_else(T::one);
                let d = gout[0] / n;
                self.accumulate(grads, *a, |g| {
                    for (x, &v) in g.iter_mut().zip(src) {
                        let local = if v.abs() < T::one() { v } else { v.signum() };
                        *x += d * local;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (m, c) = self.dims(*logits);
                let d = gout[0] / T::from_usize(m).unwrap_or_else(T::one);
                self.accumulate(grads, *logits, |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            g[r * c + j] += d * (probs[r * c + j] - target);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

pub(crate) fn masked_softmax_rows<T: Scalar>(src: &[T], mask: &[bool], m: usize, n: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let base = r * n;
        let row_mask = &mask[base..base + n];
        let mut max = T::neg_infinity();
        let mut any = false;
        for c in 0..n {
            if row_mask[c] {
                any = true;
                max = max.max(src[base + c]);
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut z = T::zero();
        for c in 0..n {
            if row_mask[c] {
                let e = (src[base + c] - max).exp();
                out[base + c] = e;
                z += e;
            }
        }
        for c in 0..n {
            if row_mask[c] {
                out[base + c] /= z;
            }
        }
    }
    Ok(out)
}

/// Mean smooth-L1 with beta = 1.
pub fn smooth_l1_mean<T: Scalar>(x: &[T]) -> T {
    let half = T::lit(0.5);
    let total: T = x
        .iter()
        .map(|&v| {
            let a = v.abs();
            if a < T::one() {
                half * v * v
            } else {
                a - half
            }
        })
        .sum();
    total / T::from_usize(x.len().max(1)).unwrap_or_else(T::one)
}
