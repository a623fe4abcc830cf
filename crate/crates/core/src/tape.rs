//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node to the tape. `backward` walks the nodes in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it. Each node's gradient is
//! therefore complete before it is propagated to its inputs.
//!
//! Tensors are treated as matrices whose last dimension is the column axis;
//! all leading dimensions are folded into rows.

use std::collections::HashMap;

use crate::error::{GlksError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_at_into, matmul_bt_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a softmax row with no unmasked position is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyRow {
    Error,
    Zero,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    MulCol {
        x: Var,
        col: Var,
    },
    Tanh(Var),
    Sigmoid(Var),
    LogFloor {
        x: Var,
        floor: T,
    },
    /// Elementwise map with caller-supplied local derivatives.
    Map {
        x: Var,
        deriv: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    Max {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    WindowSum {
        x: Var,
        m: usize,
    },
    RowWeightedSum {
        w: Var,
        v: Var,
    },
    ScatterCols {
        x: Var,
        idx: Vec<usize>,
    },
    PickCols {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A single-threaded recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to `v`, or `None` when `v` is disconnected from
    /// the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded with node")
        })
    }

    /// Gradient with respect to `v`, zeros when disconnected.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &var) in &tape.params {
            if let Some(g) = &self.grads[var.0] {
                let p = store.get_mut(id);
                if p.grad.numel() != g.len() {
                    return Err(GlksError::shape(
                        "accumulate",
                        p.grad.shape(),
                        &self.shapes[var.0],
                    ));
                }
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn is_neg_inf<T: Scalar>(x: T) -> bool {
    x.is_infinite() && x < T::zero()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).value.clone());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.item();
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().map(|&x| f(x, y)).collect(),
            )
        } else if ta.numel() == 1 {
            let x = ta.item();
            Tensor::new(
                tb.shape().to_vec(),
                tb.data().iter().map(|&y| f(x, y)).collect(),
            )
        } else {
            Err(GlksError::shape(name, ta.shape(), tb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// Adds a row vector to every row of `x` (explicit bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(GlksError::shape("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow { x, row }, ng))
    }

    /// Scales row `r` of `x` by `col[r]` (explicit gate broadcast).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let c = tx.cols();
        if tc.numel() != tx.rows() {
            return Err(GlksError::shape("mul_col", tx.shape(), tc.shape()));
        }
        let s = tc.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i / c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(out, Op::MulCol { x, col }, ng))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.unary(x, T::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.unary(x, sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// `ln(max(x, floor))`; zero derivative below the floor.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Var {
        let out = self.unary(x, |v| v.max(floor).ln());
        let ng = self.ng(x);
        self.push(out, Op::LogFloor { x, floor }, ng)
    }

    /// Elementwise map `f` with derivative `df`, both evaluated at the input.
    pub fn map(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Var {
        let out = self.unary(x, f);
        let deriv = self.value(x).data().iter().map(|&v| df(v)).collect();
        let ng = self.ng(x);
        self.push(out, Op::Map { x, deriv }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GlksError::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(GlksError::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GlksError::Contract("concat of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(GlksError::shape(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols {
            return Err(GlksError::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Row `i` of the output is row `idx[i]` of `x`. Backward scatter-adds,
    /// so repeated indices accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(GlksError::shape("gather_rows", t.shape(), &[i]));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Row-wise softmax over the last axis. Masked positions (`false`) are
    /// exactly zero; unmasked positions are positive and sum to one.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        mask: Option<&[bool]>,
        empty: EmptyRow,
    ) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(GlksError::shape("masked_softmax", t.shape(), &[m.len()]));
            }
        }
        let mut data = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let mut max = T::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                match empty {
                    EmptyRow::Error => return Err(GlksError::InvalidMask { row: r }),
                    EmptyRow::Zero => continue,
                }
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = if max.is_infinite() {
                        T::one()
                    } else {
                        (v - max).exp()
                    };
                    out[j] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None, EmptyRow::Error)
    }

    /// Maximum of a matrix along `axis` (0 reduces rows, 1 reduces columns).
    /// Masked entries are skipped; a slice with nothing unmasked yields -inf
    /// and passes no gradient. Ties route the gradient to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || axis > 1 {
            return Err(GlksError::shape("max_axis", t.shape(), &[axis]));
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(GlksError::shape("max_axis", t.shape(), &[m.len()]));
            }
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let (outer, inner) = if axis == 1 {
            (rows, cols)
        } else {
            (cols, rows)
        };
        let mut values = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best: Option<(usize, T)> = None;
            for i in 0..inner {
                let flat = if axis == 1 {
                    o * cols + i
                } else {
                    i * cols + o
                };
                if mask.is_some_and(|m| !m[flat]) {
                    continue;
                }
                let v = t.data()[flat];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((flat, v));
                }
            }
            values.push(best.map_or(T::neg_infinity(), |(_, v)| v));
            argmax.push(best.map(|(f, _)| f));
        }
        let out = Tensor::new(vec![outer], values)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Max { x, argmax }, ng))
    }

    /// Sums non-overlapping windows of `m` along the last axis. The last
    /// window may be shorter. -inf entries are excluded; a window holding
    /// only -inf entries is -inf.
    pub fn window_sum(&mut self, x: Var, m: usize) -> Result<Var> {
        if m == 0 {
            return Err(GlksError::Config("window size must be >= 1".into()));
        }
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let n_win = cols.div_ceil(m);
        let mut data = Vec::with_capacity(rows * n_win);
        for r in 0..rows {
            let row = t.row(r);
            for w in 0..n_win {
                let mut acc = T::zero();
                let mut any = false;
                for &v in &row[w * m..((w + 1) * m).min(cols)] {
                    if !is_neg_inf(v) {
                        acc += v;
                        any = true;
                    }
                }
                data.push(if any { acc } else { T::neg_infinity() });
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n_win;
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::WindowSum { x, m }, ng))
    }

    /// `out[r] = Σ_j w[r, j] · v[r·n + j]` for `w: [R, n]`, `v: [R·n, d]`.
    pub fn row_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        let (rows, n) = (tw.rows(), tw.cols());
        if tv.rows() != rows * n {
            return Err(GlksError::shape("row_weighted_sum", tw.shape(), tv.shape()));
        }
        let d = tv.cols();
        let mut data = vec![T::zero(); rows * d];
        for r in 0..rows {
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..n {
                let wj = tw.data()[r * n + j];
                if wj == T::zero() {
                    continue;
                }
                for (o, &x) in out.iter_mut().zip(tv.row(r * n + j)) {
                    *o += wj * x;
                }
            }
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(out, Op::RowWeightedSum { w, v }, ng))
    }

    /// Adds `x[r, j]` into column `idx[r·n + j]` of an `[R, n_out]` output.
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.len() != t.numel() {
            return Err(GlksError::shape("scatter_cols", t.shape(), &[idx.len()]));
        }
        let mut data = vec![T::zero(); rows * n_out];
        for r in 0..rows {
            for j in 0..cols {
                let c = idx[r * cols + j];
                if c >= n_out {
                    return Err(GlksError::shape("scatter_cols", &[rows, n_out], &[c]));
                }
                data[r * n_out + c] += t.data()[r * cols + j];
            }
        }
        let out = Tensor::new(vec![rows, n_out], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::ScatterCols {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Widens `x: [R, n]` to `[R, n_out]` with trailing zero columns.
    pub fn pad_cols(&mut self, x: Var, n_out: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if n_out < cols {
            return Err(GlksError::shape("pad_cols", t.shape(), &[n_out]));
        }
        let idx: Vec<usize> = (0..t.numel()).map(|i| i % cols).collect();
        self.scatter_cols(x, &idx, n_out)
    }

    /// `out[r] = x[r, idx[r]]`
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.len() != rows || idx.iter().any(|&c| c >= cols) {
            return Err(GlksError::shape("pick_cols", t.shape(), &[idx.len()]));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| t.data()[r * cols + c])
            .collect();
        let out = Tensor::new(vec![rows], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::PickCols {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `x · W + b` for `x: [R, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(GlksError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Grads {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let numel = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_bt_into(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_into(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.reduce_into(grads, *a, g, |x| x);
                self.reduce_into(grads, *b, g, |x| sign * x);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let ga: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * pick(tb, i))
                    .collect();
                let gb: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * pick(ta, i))
                    .collect();
                self.reduce_into(grads, *a, &ga, |x| x);
                self.reduce_into(grads, *b, &gb, |x| x);
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += *scale * gi;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                let c = node.value.cols();
                if let Some(gr) = self.slot(grads, *row) {
                    for (i, &gi) in g.iter().enumerate() {
                        gr[i % c] += gi;
                    }
                }
            }
            Op::MulCol { x, col } => {
                let c = node.value.cols();
                let (tx, tc) = (self.value(*x).data(), self.value(*col).data());
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] += gi * tc[i / c];
                    }
                }
                if let Some(gc) = self.slot(grads, *col) {
                    for (i, &gi) in g.iter().enumerate() {
                        gc[i / c] += gi * tx[i];
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (T::one() - y);
                    }
                }
            }
            Op::LogFloor { x, floor } => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(tx) {
                        if v > *floor {
                            *d += gi / v;
                        }
                    }
                }
            }
            Op::Map { x, deriv } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gi), &k) in gx.iter_mut().zip(g).zip(deriv) {
                        *d += gi * k;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        for (d, &gi) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (node.value.rows(), node.value.cols());
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[o * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot = y.iter().zip(gy).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..cols {
                            gx[r * cols + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Max { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, am) in argmax.iter().enumerate() {
                        if let Some(f) = am {
                            gx[*f] += g[o];
                        }
                    }
                }
            }
            Op::WindowSum { x, m } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let n_win = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for j in 0..cols {
                            if !is_neg_inf(tx.data()[r * cols + j]) {
                                gx[r * cols + j] += g[r * n_win + j / m];
                            }
                        }
                    }
                }
            }
            Op::RowWeightedSum { w, v } => {
                let (tw, tv) = (self.value(*w), self.value(*v));
                let (rows, n, d) = (tw.rows(), tw.cols(), tv.cols());
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..rows {
                        let go = &g[r * d..(r + 1) * d];
                        for j in 0..n {
                            let vr = tv.row(r * n + j);
                            gw[r * n + j] +=
                                go.iter().zip(vr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for r in 0..rows {
                        let go = &g[r * d..(r + 1) * d];
                        for j in 0..n {
                            let wj = tw.data()[r * n + j];
                            let row = &mut gv[(r * n + j) * d..(r * n + j + 1) * d];
                            for (dst, &gi) in row.iter_mut().zip(go) {
                                *dst += wj * gi;
                            }
                        }
                    }
                }
            }
            Op::ScatterCols { x, idx } => {
                let n_out = node.value.cols();
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &c) in idx.iter().enumerate() {
                        gx[i] += g[(i / cols) * n_out + c];
                    }
                }
            }
            Op::PickCols { x, idx } => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }

    /// Accumulates `g` into `v`, summing when `v` was broadcast as a scalar.
    fn reduce_into(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], f: impl Fn(T) -> T) {
        if let Some(gv) = self.slot(grads, v) {
            if gv.len() == g.len() {
                for (d, &gi) in gv.iter_mut().zip(g) {
                    *d += f(gi);
                }
            } else {
                let total = g.iter().fold(T::zero(), |a, &b| a + b);
                gv[0] += f(total);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
