//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that (transitively) depends on a leaf with
//! `requires_grad = true`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    RowCrossEntropy {
        logits: Var,
        gold: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ZeroRows(Var, Vec<bool>),
    MulConst(Var, Tensor<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    AddDiag(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SegmentSoftmax(Var, Vec<usize>),
    SegmentWeightedSum {
        x: Var,
        w: Var,
        offsets: Vec<usize>,
    },
    Max(Vec<Var>, Vec<u32>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations and computes gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient for `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::AddDiag(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GatherRows(a, _)
            | Op::ZeroRows(a, _)
            | Op::MulConst(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::RowCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::Max(vs, _) => vs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SegmentWeightedSum { x, w, .. } => vec![*x, *w],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let vb = self.value(bias);
        let c = va.cols();
        if vb.numel() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let b = vb.data();
        let data = va
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c))
    }

    /// Multiplies by a fixed tensor that receives no gradient.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_const",
                left: va.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.tanh());
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var, NumericsError> {
        if !self.train || p <= 0.0 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        let keep = T::lit(1.0 / (1.0 - p));
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = Tensor::new(shape, data)?;
        self.mul_const(a, mask)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let out = Tensor::new(vec![n, m], data)?;
        self.push("transpose", out, Op::Transpose(a))
    }

    /// `x + w * I` for square `x` and scalar `w`.
    pub fn add_diag(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("add_diag", x)?;
        if m != n || self.value(w).numel() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "add_diag",
                left: vec![m, n],
                right: self.shape(w).to_vec(),
            });
        }
        let wv = self.value(w).item();
        let mut out = self.value(x).clone();
        for i in 0..n {
            out.data_mut()[i * n + i] += wv;
        }
        self.push("add_diag", out, Op::AddDiag(x, w))
    }

    // ---- normalisation -----------------------------------------------

    /// Softmax over the last dimension. Entries whose column is `false` in
    /// `col_mask` get probability zero.
    pub fn softmax(&mut self, a: Var, col_mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let c = va.cols();
        if let Some(m) = col_mask {
            if m.len() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax",
                    left: va.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row, col_mask)?;
        }
        self.push("softmax", out, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: vx.shape().to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::lit(LN_EPS);
        let cf = T::from_usize(c).expect("dim fits");
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    // ---- losses and reductions ---------------------------------------

    /// `-log softmax(logits)[gold]` for a single score vector.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var, NumericsError> {
        let n = self.value(logits).numel();
        let row = self.reshape(logits, vec![1, n])?;
        self.row_cross_entropy(row, &[Some(gold)], None)
    }

    /// Sum over rows with a gold column of the masked cross-entropy of that
    /// row. `mask` (same length as the logits) excludes entries from the
    /// softmax; a gold entry that is masked is an error.
    pub fn row_cross_entropy(
        &mut self,
        logits: Var,
        gold: &[Option<usize>],
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let vl = self.value(logits);
        let c = vl.cols();
        let r = vl.rows();
        if gold.len() != r {
            return Err(NumericsError::ShapeMismatch {
                op: "row_cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![gold.len()],
            });
        }
        if let Some(m) = mask {
            if m.len() != vl.numel() {
                return Err(NumericsError::ShapeMismatch {
                    op: "row_cross_entropy",
                    left: vl.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        for i in 0..r {
            let row_mask = mask.map(|m| &m[i * c..(i + 1) * c]);
            let row = &mut probs[i * c..(i + 1) * c];
            if let Some(g) = gold[i] {
                if g >= c {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "row_cross_entropy",
                        index: g,
                        len: c,
                    });
                }
                if row_mask.is_some_and(|m| !m[g]) {
                    return Err(NumericsError::MaskedTarget { index: g });
                }
                softmax_in_place(row, row_mask)?;
                loss -= row[g].ln();
            } else {
                row.iter_mut().for_each(|p| *p = T::zero());
            }
        }
        let out = Tensor::scalar(loss);
        self.push(
            "row_cross_entropy",
            out,
            Op::RowCrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let n = T::from_usize(va.numel()).expect("count fits");
        let s = va.data().iter().copied().sum::<T>() / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Elementwise maximum across same-shape inputs; ties resolve to the
    /// earliest input.
    pub fn max_of(&mut self, vars: &[Var]) -> Result<Var, NumericsError> {
        let first = *vars.first().ok_or(NumericsError::Empty { op: "max_of" })?;
        for &v in &vars[1..] {
            self.same_shape("max_of", first, v)?;
        }
        let mut out = self.value(first).clone();
        let mut src = vec![0u32; out.numel()];
        for (k, &v) in vars.iter().enumerate().skip(1) {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                if x > out.data()[i] {
                    out.data_mut()[i] = x;
                    src[i] = k as u32;
                }
            }
        }
        self.push("max_of", out, Op::Max(vars.to_vec(), src))
    }

    // ---- structural --------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var, NumericsError> {
        let first = *vars.first().ok_or(NumericsError::Empty { op: "concat_cols" })?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &v in vars {
            let t = self.value(v);
            if t.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vars {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(vars.to_vec()))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var, NumericsError> {
        let first = *vars.first().ok_or(NumericsError::Empty { op: "concat_rows" })?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let t = self.value(v);
            if t.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", out, Op::ConcatRows(vars.to_vec()))
    }

    /// Row lookup; the backward pass scatters gradient back onto rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Replaces the rows flagged `true` with exact zeros.
    pub fn zero_rows(&mut self, a: Var, zero: &[bool]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if zero.len() != va.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "zero_rows",
                left: va.shape().to_vec(),
                right: vec![zero.len()],
            });
        }
        let mut out = va.clone();
        for (i, &z) in zero.iter().enumerate() {
            if z {
                out.row_mut(i).iter_mut().for_each(|x| *x = T::zero());
            }
        }
        self.push("zero_rows", out, Op::ZeroRows(a, zero.to_vec()))
    }

    // ---- fused kernels -----------------------------------------------

    /// Multi-head scaled dot-product attention. `q` is `[nq, d]`, `k` and
    /// `v` are `[nk, d]`; `key_mask[j] == false` removes key `j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (nq, d) = self.matrix_dims("attention", q)?;
        let (nk, dk) = self.matrix_dims("attention", k)?;
        let (nv, dv) = self.matrix_dims("attention", v)?;
        if dk != d || dv != d || nv != nk {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                left: vec![nq, d],
                right: vec![nk, dk],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::HeadsDoNotDivide { dim: d, heads });
        }
        if let Some(m) = key_mask {
            if m.len() != nk {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    left: vec![nk],
                    right: vec![m.len()],
                });
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("dim fits").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    p[j] = dot(qi, kj) * scale;
                }
                softmax_in_place(p, key_mask)?;
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    let pj = p[j];
                    if pj == T::zero() {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for t in 0..dh {
                        oi[t] += pj * vj[t];
                    }
                }
            }
        }
        let out = Tensor::new(vec![nq, d], out)?;
        self.push("attention", out, Op::Attention { q, k, v, heads, probs })
    }

    /// Softmax within consecutive segments `offsets[s]..offsets[s + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        check_offsets("segment_softmax", offsets, va.numel())?;
        let mut out = va.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut out.data_mut()[w[0]..w[1]], None)?;
        }
        self.push("segment_softmax", out, Op::SegmentSoftmax(a, offsets.to_vec()))
    }

    /// For each segment, `sum_i w[i] * x[i]` over its rows of `x`.
    pub fn segment_weighted_sum(&mut self, x: Var, w: Var, offsets: &[usize]) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, c) = (vx.rows(), vx.cols());
        if vw.numel() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "segment_weighted_sum",
                left: vx.shape().to_vec(),
                right: vw.shape().to_vec(),
            });
        }
        check_offsets("segment_weighted_sum", offsets, n)?;
        let segs = offsets.len() - 1;
        let mut data = vec![T::zero(); segs * c];
        for s in 0..segs {
            let o = &mut data[s * c..(s + 1) * c];
            for i in offsets[s]..offsets[s + 1] {
                let wi = vw.data()[i];
                for (dst, &src) in o.iter_mut().zip(vx.row(i)) {
                    *dst += wi * src;
                }
            }
        }
        let out = Tensor::new(vec![segs, c], data)?;
        self.push(
            "segment_weighted_sum",
            out,
            Op::SegmentWeightedSum {
                x,
                w,
                offsets: offsets.to_vec(),
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Backpropagates from the scalar `loss`, adding into existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar { shape: shape.to_vec() });
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            self.backprop_node(i, &g, &mut local);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, local: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(local, *a, g.clone());
                }
                if needs(b) {
                    accumulate(local, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(local, *a, g.clone());
                }
                if needs(b) {
                    accumulate(local, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    accumulate(local, *a, zip_map(g, vb, |x, y| x * y));
                }
                if needs(b) {
                    accumulate(local, *b, zip_map(g, va, |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    accumulate(local, *a, g.clone());
                }
                if needs(b) {
                    let c = g.cols();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c.max(1)) {
                        for (d, &x) in gb.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    accumulate(local, *b, Tensor::new(shape, gb).expect("bias shape"));
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    let c = *c;
                    accumulate(local, *a, g.map(|x| x * c));
                }
            }
            Op::MulConst(a, c) => {
                if needs(a) {
                    accumulate(local, *a, zip_map(g, c, |x, y| x * y));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if needs(a) {
                    // dA = dC * B^T
                    let bt = transpose_raw(vb.data(), k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    accumulate(local, *a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if needs(b) {
                    // dB = A^T * dC
                    let at = transpose_raw(va.data(), m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    accumulate(local, *b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let d = transpose_raw(g.data(), m, n);
                    accumulate(local, *a, Tensor::new(vec![n, m], d).expect("shape"));
                }
            }
            Op::Tanh(a) => {
                if needs(a) {
                    accumulate(local, *a, zip_map(g, &node.value, |x, y| x * (T::one() - y * y)));
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    let va = self.value(*a);
                    accumulate(
                        local,
                        *a,
                        zip_map(g, va, |x, y| if y > T::zero() { x } else { T::zero() }),
                    );
                }
            }
            Op::Softmax(a) => {
                if needs(a) {
                    let c = g.cols();
                    let mut d = Vec::with_capacity(g.numel());
                    for (gr, yr) in g.data().chunks(c.max(1)).zip(node.value.data().chunks(c.max(1))) {
                        softmax_backward(gr, yr, &mut d);
                    }
                    let shape = g.shape().to_vec();
                    accumulate(local, *a, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::RowCrossEntropy { logits, gold, probs } => {
                if needs(logits) {
                    let up = g.item();
                    let vl = self.value(*logits);
                    let c = vl.cols();
                    let mut d = probs.clone();
                    for (r, gr) in gold.iter().enumerate() {
                        if let Some(gc) = gr {
                            d[r * c + gc] -= T::one();
                        }
                    }
                    d.iter_mut().for_each(|x| *x *= up);
                    let shape = vl.shape().to_vec();
                    accumulate(local, *logits, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(local, *a, Tensor::full(&shape, g.item()));
                }
            }
            Op::Mean(a) => {
                if needs(a) {
                    let va = self.value(*a);
                    let n = T::from_usize(va.numel()).expect("count fits");
                    let shape = va.shape().to_vec();
                    accumulate(local, *a, Tensor::full(&shape, g.item() / n));
                }
            }
            Op::Max(vars, src) => {
                for (k, v) in vars.iter().enumerate() {
                    if !needs(v) {
                        continue;
                    }
                    let d = g
                        .data()
                        .iter()
                        .zip(src)
                        .map(|(&x, &s)| if s as usize == k { x } else { T::zero() })
                        .collect();
                    accumulate(local, *v, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(local, *a, g.clone().reshaped(shape).expect("shape"));
                }
            }
            Op::ConcatCols(vars) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for v in vars {
                    let vv = self.value(*v);
                    let c = vv.cols();
                    if needs(v) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        accumulate(local, *v, Tensor::new(vv.shape().to_vec(), d).expect("shape"));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(vars) => {
                let c = g.cols();
                let mut off = 0;
                for v in vars {
                    let vv = self.value(*v);
                    let n = vv.numel();
                    if needs(v) {
                        let d = g.data()[off..off + n].to_vec();
                        accumulate(local, *v, Tensor::new(vv.shape().to_vec(), d).expect("shape"));
                    }
                    off += vv.rows() * c;
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(a) {
                    let va = self.value(*a);
                    let mut d = Tensor::zeros(va.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (dst, &src) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *dst += src;
                        }
                    }
                    accumulate(local, *a, d);
                }
            }
            Op::ZeroRows(a, zero) => {
                if needs(a) {
                    let mut d = g.clone();
                    for (i, &z) in zero.iter().enumerate() {
                        if z {
                            d.row_mut(i).iter_mut().for_each(|x| *x = T::zero());
                        }
                    }
                    accumulate(local, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                let cf = T::from_usize(c).expect("dim fits");
                if needs(x) {
                    let mut d = Vec::with_capacity(g.numel());
                    for (r, (gr, hr)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / cf;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                        for j in 0..c {
                            d.push(rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh));
                        }
                    }
                    let shape = g.shape().to_vec();
                    accumulate(local, *x, Tensor::new(shape, d).expect("shape"));
                }
                if needs(gain) {
                    let mut d = vec![T::zero(); c];
                    for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                    let shape = self.shape(*gain).to_vec();
                    accumulate(local, *gain, Tensor::new(shape, d).expect("shape"));
                }
                if needs(bias) {
                    let mut d = vec![T::zero(); c];
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    accumulate(local, *bias, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::AddDiag(x, w) => {
                if needs(x) {
                    accumulate(local, *x, g.clone());
                }
                if needs(w) {
                    let n = g.shape()[0];
                    let tr = (0..n).map(|i| g.data()[i * n + i]).sum();
                    let shape = self.shape(*w).to_vec();
                    accumulate(local, *w, Tensor::full(&shape, tr));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let nq = self.shape(*q)[0];
                let (nk, d) = (self.shape(*k)[0], self.shape(*k)[1]);
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).expect("dim fits").sqrt();
                let gd = g.data();
                let mut dq = vec![T::zero(); nq * d];
                let mut dk = vec![T::zero(); nk * d];
                let mut dv = vec![T::zero(); nk * d];
                let mut dp = vec![T::zero(); nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let gi = &gd[i * d + off..i * d + off + dh];
                        for j in 0..nk {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            if p[j] != T::zero() {
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for t in 0..dh {
                                    dvj[t] += p[j] * gi[t];
                                }
                            }
                        }
                        let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                        let qi = &qd[i * d + off..i * d + off + dh];
                        for j in 0..nk {
                            if p[j] == T::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - inner) * scale;
                            let kj = &kd[j * d + off..j * d + off + dh];
                            for t in 0..dh {
                                dq[i * d + off + t] += ds * kj[t];
                                dk[j * d + off + t] += ds * qi[t];
                            }
                        }
                    }
                }
                if needs(q) {
                    accumulate(local, *q, Tensor::new(vec![nq, d], dq).expect("shape"));
                }
                if needs(k) {
                    accumulate(local, *k, Tensor::new(vec![nk, d], dk).expect("shape"));
                }
                if needs(v) {
                    accumulate(local, *v, Tensor::new(vec![nk, d], dv).expect("shape"));
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                if needs(a) {
                    let mut d = Vec::with_capacity(g.numel());
                    for w in offsets.windows(2) {
                        softmax_backward(&g.data()[w[0]..w[1]], &node.value.data()[w[0]..w[1]], &mut d);
                    }
                    let shape = g.shape().to_vec();
                    accumulate(local, *a, Tensor::new(shape, d).expect("shape"));
                }
            }
            Op::SegmentWeightedSum { x, w, offsets } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let c = vx.cols();
                if needs(x) {
                    let mut d = Tensor::zeros(vx.shape());
                    for (s, win) in offsets.windows(2).enumerate() {
                        for i in win[0]..win[1] {
                            let wi = vw.data()[i];
                            for (dst, &src) in d.row_mut(i).iter_mut().zip(g.row(s)) {
                                *dst += wi * src;
                            }
                        }
                    }
                    accumulate(local, *x, d);
                }
                if needs(w) {
                    let mut d = vec![T::zero(); vw.numel()];
                    for (s, win) in offsets.windows(2).enumerate() {
                        for i in win[0]..win[1] {
                            d[i] = dot(vx.row(i), &g.data()[s * c..(s + 1) * c]);
                        }
                    }
                    accumulate(local, *w, Tensor::new(vw.shape().to_vec(), d).expect("shape"));
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(local: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut local[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn check_offsets(op: &'static str, offsets: &[usize], n: usize) -> Result<(), NumericsError> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == n
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(NumericsError::BadSegments { op })
    }
}

/// Max-subtracted softmax; masked entries become zero.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> Result<(), NumericsError> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return Err(NumericsError::AllMasked);
    }
    let mut total = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if keep(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    Ok(())
}

fn softmax_backward<T: Scalar>(g: &[T], y: &[T], out: &mut Vec<T>) {
    let inner: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
    out.extend(g.iter().zip(y).map(|(&gi, &yi)| yi * (gi - inner)));
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
