//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in forward order and is consumed by a
//! single call to [`Tape::backward`]. Operands are addressed through [`Var`]
//! handles, which are only valid on the tape that created them.
//!
//! Tie and kink conventions:
//! - `relu'(0) = 0`
//! - `max` routes gradient to the lowest index among equal maxima
//! - `localize` passes entries with `x > m`; rows where nothing passes fall
//!   back to the unthresholded input

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm_scaled, MatView, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: usize,
}

/// Backward rule for [`Tape::custom`]: given the operand values, the forward
/// output, and the output gradient, return one gradient per operand.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send>;

enum Op {
    Leaf,
    Const,
    MatMul { a: usize, b: usize, ta: bool, tb: bool, alpha: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    AddScalar(usize),
    Scale(usize, f64),
    Relu(usize),
    Sin(usize),
    Exp(usize),
    Square(usize),
    Poly { x: usize, coeffs: Vec<f64> },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Max { x: usize, axis: usize, arg: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Softmax(usize),
    Localize { x: usize, m: f64, fallback: Vec<bool> },
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Custom { inputs: Vec<usize>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use gradient tape.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    kink_hash: u64,
    attention_elements: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            kink_hash: 0xcbf2_9ce4_8422_2325,
            attention_elements: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch decision taken so far (relu signs, threshold
    /// masks, max positions). Two evaluations with equal hashes followed the
    /// same piecewise-smooth branch.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    /// Total attention-map elements recorded through [`Tape::note_attention_map`].
    pub fn attention_elements(&self) -> u64 {
        self.attention_elements
    }

    pub fn note_attention_map(&mut self, rows: usize, cols: usize) {
        self.attention_elements += (rows * cols) as u64;
    }

    fn mix_kink(&mut self, bit: u64) {
        mix_word(&mut self.kink_hash, bit);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a trainable input; it will receive a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of `v` after [`Tape::backward`]; `None` for
    /// constants and values the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.id {
            return None;
        }
        let g = self.grads.get(v.idx)?.as_ref()?;
        let shape = self.nodes[v.idx].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ----- matrix products -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.matmul_scaled(a, ta, b, tb, 1.0)
    }

    /// `alpha · op(a) · op(b)` in one product.
    pub fn matmul_scaled(&mut self, a: Var, ta: bool, b: Var, tb: bool, alpha: f64) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (ar, ac) = av.dims2("matmul")?;
        let (br, bc) = bv.dims2("matmul")?;
        let va = MatView::new(av.data(), ar, ac).maybe_t(ta);
        let vb = MatView::new(bv.data(), br, bc).maybe_t(tb);
        if va.cols != vb.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![va.rows, va.cols],
                right: vec![vb.rows, vb.cols],
            });
        }
        let mut out = vec![0.0; va.rows * vb.cols];
        gemm_scaled(alpha, va, vb, &mut out, false);
        let value = Tensor::new(vec![va.rows, vb.cols], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            value,
            Op::MatMul {
                a: ia,
                b: ib,
                ta,
                tb,
                alpha,
            },
            rg,
        ))
    }

    // ----- elementwise -----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let xv = &self.nodes[ix].value;
        let rv = &self.nodes[ir].value;
        let n = xv.last_dim();
        if rv.rank() != 1 || rv.numel() != n {
            return Err(Error::Shape {
                op: name,
                left: xv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % n]))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(ix) || self.rg(ir);
        Ok(self.push(value, op(ix, ir), rg))
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, |a, b| a + b, |x, row| Op::AddRow { x, row })
    }

    /// Multiplies every row (last axis) of `x` elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, |a, b| a * b, |x, row| Op::MulRow { x, row })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(f);
        let rg = self.rg(ix);
        Ok(self.push(value, op, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary(x, |v| v + c, Op::AddScalar(ix))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary(x, |v| v * c, Op::Scale(ix, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        mix_mask(&mut self.kink_hash, self.nodes[ix].value.data().iter().map(|&v| v > 0.0));
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(ix))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary(x, f64::sin, Op::Sin(ix))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary(x, f64::exp, Op::Exp(ix))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary(x, |v| v * v, Op::Square(ix))
    }

    /// `Σ_k coeffs[k]·x^k`, elementwise.
    pub fn poly(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let ix = self.check(x)?;
        let c = coeffs.to_vec();
        let f = move |v: f64| c.iter().rev().fold(0.0, |acc, &a| acc * v + a);
        self.unary(
            x,
            f,
            Op::Poly {
                x: ix,
                coeffs: coeffs.to_vec(),
            },
        )
    }

    // ----- reductions ------------------------------------------------------

    fn axis_check(&self, op: &'static str, ix: usize, axis: usize) -> Result<()> {
        let rank = self.nodes[ix].value.rank();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn reduce_sum_data(t: &Tensor, axis: usize) -> Vec<f64> {
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &d[base..base + inner]);
            }
        }
        out
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        self.axis_check("sum", ix, axis)?;
        let t = &self.nodes[ix].value;
        let value = Tensor::new(reduced_shape(t.shape(), axis), Self::reduce_sum_data(t, axis))?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Sum { x: ix, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        self.axis_check("mean", ix, axis)?;
        let t = &self.nodes[ix].value;
        let len = t.shape()[axis].max(1) as f64;
        let data = Self::reduce_sum_data(t, axis).into_iter().map(|v| v / len).collect();
        let value = Tensor::new(reduced_shape(t.shape(), axis), data)?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Mean { x: ix, axis }, rg))
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        self.axis_check("max", ix, axis)?;
        let t = &self.nodes[ix].value;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if len == 0 {
            return Err(Error::invalid("max over an empty axis"));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..len {
                    // strict comparison keeps the lowest index on ties
                    if d[(o * len + k) * inner + i] > d[(o * len + best) * inner + i] {
                        best = k;
                    }
                }
                out.push(d[(o * len + best) * inner + i]);
                arg.push(best);
            }
        }
        let value = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        for &a in &arg {
            self.mix_kink(a as u64 + 2);
        }
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Max { x: ix, axis, arg }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ix), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(ix), rg))
    }

    // ----- normalizations --------------------------------------------------

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let n = t.last_dim().max(1);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let s: f64 = out[start..].iter().sum();
            for v in &mut out[start..] {
                *v /= s;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Softmax(ix), rg))
    }

    /// Thresholds each last-axis row at `m` and renormalizes:
    /// `relu(x − m) / Σ relu(x − m)`. A row with no entry above `m` is
    /// returned unchanged.
    pub fn localize(&mut self, x: Var, m: f64) -> Result<Var> {
        let ix = self.check(x)?;
        if !(0.0..1.0).contains(&m) {
            return Err(Error::invalid(format!("threshold m={m} outside [0, 1)")));
        }
        let t = &self.nodes[ix].value;
        if let Some(&v) = t.data().iter().find(|v| v.is_nan() || **v < 0.0) {
            if v.is_nan() {
                return Err(Error::NonFinite { op: "localize" });
            }
            return Err(Error::NegativeEntry {
                op: "localize",
                value: v,
            });
        }
        let n = t.last_dim().max(1);
        let mut out = t.data().to_vec();
        let mut fallback = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let s: f64 = row.iter().map(|&v| (v - m).max(0.0)).sum();
            let fb = s <= 0.0;
            fallback.push(fb);
            if !fb {
                for v in row.iter_mut() {
                    *v = if *v > m { (*v - m) / s } else { 0.0 };
                }
            }
        }
        mix_mask(&mut self.kink_hash, t.data().iter().map(|&v| v > m));
        mix_mask(&mut self.kink_hash, fallback.iter().copied());
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Localize { x: ix, m, fallback }, rg))
    }

    /// Per-row standardization along the last axis (no affine part).
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let ix = self.check(x)?;
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm eps must be positive"));
        }
        let t = &self.nodes[ix].value;
        let n = t.last_dim().max(1);
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::LayerNorm { x: ix, inv_std }, rg))
    }

    // ----- layout ----------------------------------------------------------

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.transpose()?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Transpose(ix), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(ix);
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, cols) = self.nodes[first].value.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.nodes[first].value.shape().to_vec(),
                    right: self.nodes[i].value.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(idx), rg))
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = self.nodes[first].value.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.nodes[first].value.shape().to_vec(),
                    right: self.nodes[i].value.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(idx), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let (rows, cols) = t.dims2("slice_cols")?;
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(ix);
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { x: ix, start }, rg))
    }

    /// Selects (possibly repeated) rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let (r, c) = t.dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather_rows: row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(ix);
        let value = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x: ix,
                idx: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        let idx = inputs.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::Custom { inputs: idx, backward }, rg))
    }

    // ----- reverse pass ----------------------------------------------------

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::invalid("backward: loss does not depend on any leaf"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |j: usize| &nodes[j].value;
        let mut acc = |j: usize, contrib: Vec<f64>| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => add_into(existing, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: usize, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            val(x).data().iter().zip(g).map(|(&v, &gi)| f(v, gi)).collect()
        };

        match &nodes[i].op {
            Op::Leaf | Op::Const => {}
            &Op::MatMul { a, b, ta, tb, alpha } => {
                let (av, bv) = (val(a), val(b));
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let opa = MatView::new(av.data(), ar, ac).maybe_t(ta);
                let opb = MatView::new(bv.data(), br, bc).maybe_t(tb);
                let dc = MatView::new(g, opa.rows, opb.cols);
                if nodes[a].requires_grad {
                    let mut da = vec![0.0; ar * ac];
                    if ta {
                        gemm_scaled(alpha, opb, dc.t(), &mut da, false);
                    } else {
                        gemm_scaled(alpha, dc, opb.t(), &mut da, false);
                    }
                    acc(a, da);
                }
                if nodes[b].requires_grad {
                    let mut db = vec![0.0; br * bc];
                    if tb {
                        gemm_scaled(alpha, dc.t(), opa, &mut db, false);
                    } else {
                        gemm_scaled(alpha, opa.t(), dc, &mut db, false);
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let db = elementwise(a, &|x, gi| x * gi);
                let da = elementwise(b, &|y, gi| y * gi);
                acc(a, da);
                acc(b, db);
            }
            &Op::AddRow { x, row } => {
                let n = val(row).numel();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks(n.max(1)) {
                    add_into(&mut dr, chunk);
                }
                acc(x, g.to_vec());
                acc(row, dr);
            }
            &Op::MulRow { x, row } => {
                let r = val(row).data();
                let n = r.len();
                let xv = val(x).data();
                let mut dr = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (k, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                    dx[k] = gi * r[k % n];
                    dr[k % n] += gi * xi;
                }
                acc(x, dx);
                acc(row, dr);
            }
            &Op::AddScalar(x) => acc(x, g.to_vec()),
            &Op::Scale(x, c) => acc(x, g.iter().map(|v| v * c).collect()),
            &Op::Relu(x) => acc(x, elementwise(x, &|v, gi| if v > 0.0 { gi } else { 0.0 })),
            &Op::Sin(x) => acc(x, elementwise(x, &|v, gi| v.cos() * gi)),
            &Op::Exp(x) => acc(x, out.data().iter().zip(g).map(|(y, gi)| y * gi).collect()),
            &Op::Square(x) => acc(x, elementwise(x, &|v, gi| 2.0 * v * gi)),
            Op::Poly { x, coeffs } => {
                let d: Vec<f64> = coeffs.iter().enumerate().skip(1).map(|(k, &c)| k as f64 * c).collect();
                acc(
                    *x,
                    elementwise(*x, &|v, gi| gi * d.iter().rev().fold(0.0, |a, &c| a * v + c)),
                );
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(val(x).shape(), axis);
                let scale = match nodes[i].op {
                    Op::Mean { .. } => 1.0 / len.max(1) as f64,
                    _ => 1.0,
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for j in 0..inner {
                            dx[(o * len + k) * inner + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                acc(x, dx);
            }
            Op::Max { x, axis, arg } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let k = arg[o * inner + j];
                        dx[(o * len + k) * inner + j] += g[o * inner + j];
                    }
                }
                acc(*x, dx);
            }
            &Op::SumAll(x) => acc(x, vec![g[0]; val(x).numel()]),
            &Op::MeanAll(x) => {
                let n = val(x).numel();
                acc(x, vec![g[0] / n.max(1) as f64; n]);
            }
            &Op::Softmax(x) => {
                let n = out.last_dim().max(1);
                let mut dx = vec![0.0; g.len()];
                for ((y, gy), d) in out.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        d[k] = y[k] * (gy[k] - dot);
                    }
                }
                acc(x, dx);
            }
            Op::Localize { x, m, fallback } => {
                let xv = val(*x);
                let n = xv.last_dim().max(1);
                let mut dx = vec![0.0; g.len()];
                for (r, fb) in fallback.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    if *fb {
                        dx[span.clone()].copy_from_slice(&g[span]);
                        continue;
                    }
                    let xr = &xv.data()[span.clone()];
                    let yr = &out.data()[span.clone()];
                    let gr = &g[span.clone()];
                    let s: f64 = xr.iter().map(|&v| (v - m).max(0.0)).sum();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        if xr[k] > *m {
                            dx[r * n + k] = (gr[k] - dot) / s;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.last_dim().max(1);
                let nf = n as f64;
                let mut dx = vec![0.0; g.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let sg: f64 = gy.iter().sum();
                    let sgy: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        dx[r * n + k] = inv / nf * (nf * gy[k] - sg - y[k] * sgy);
                    }
                }
                acc(*x, dx);
            }
            &Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![0.0; g.len()];
                for a in 0..r {
                    for b in 0..c {
                        dx[b * r + a] = g[a * c + b];
                    }
                }
                acc(x, dx);
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let rows = out.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    acc(p, dp);
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = (val(x).shape()[0], val(x).shape()[1]);
                let w = out.last_dim();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(x, dx);
            }
            Op::GatherRows { x, idx } => {
                let c = out.last_dim();
                let mut dx = vec![0.0; val(*x).numel()];
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut dx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
                acc(*x, dx);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("gradient shape");
                let contribs = backward(&vals, out, &gt);
                for (&j, c) in inputs.iter().zip(contribs) {
                    debug_assert_eq!(c.shape(), val(j).shape());
                    acc(j, c.into_data());
                }
            }
        }
    }
}

fn mix_word(hash: &mut u64, word: u64) {
    *hash ^= word;
    *hash = hash.wrapping_mul(0x0100_0000_01b3);
}

/// Folds a sequence of branch decisions into `hash`, 64 per word.
fn mix_mask(hash: &mut u64, bits: impl Iterator<Item = bool>) {
    let (mut word, mut n) = (0u64, 0u64);
    for b in bits {
        word |= (b as u64) << (n % 64);
        n += 1;
        if n % 64 == 0 {
            mix_word(hash, word);
            word = 0;
        }
    }
    mix_word(hash, word);
    mix_word(hash, n);
}
