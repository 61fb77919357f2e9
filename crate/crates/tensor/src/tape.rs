//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and the
//! indices of its parents. Parents always precede children, so the
//! backward pass is a single reverse sweep that visits each node once.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single row repeated over every row.
    Row,
    /// Right operand is a single column repeated over every column.
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>, Tensor),
    HeadMatMul(Var, Var, bool),
    HeadDot(Var, Var),
    HeadScale(Var, Var),
    SegmentSoftmax(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
    param_rows: Vec<(ParamId, Vec<usize>, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Adds parameter gradients into `params`' accumulators.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for (id, g) in &self.params {
            params.grad_mut(*id).axpy(1.0, g)?;
        }
        for (id, rows, g) in &self.param_rows {
            let acc = params.grad_mut(*id);
            let (_, cols) = acc.dims2().ok_or_else(|| TensorError::Shape {
                op: "param_rows",
                detail: "embedding table must be rank ≤ 2".into(),
            })?;
            let data = acc.data_mut();
            for (r, &row) in rows.iter().enumerate() {
                let dst = &mut data[row * cols..(row + 1) * cols];
                for (d, s) in dst.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

/// Record of executed primitives. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn mat(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| shape_err(op, format!("expected rank ≤ 2, got shape {:?}", t.shape())))
}

fn broadcast_mode(a: &Tensor, b: &Tensor, op: &'static str, allow_col: bool) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.len() == 1 {
        return Ok(Broadcast::Scalar);
    }
    let (ar, ac) = mat(a, op)?;
    let (br, bc) = mat(b, op)?;
    if br == 1 && bc == ac {
        return Ok(Broadcast::Row);
    }
    if allow_col && bc == 1 && br == ar {
        return Ok(Broadcast::Col);
    }
    Err(shape_err(
        op,
        format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
    ))
}

/// Index of the right operand's element paired with flat index `i` of the left.
#[inline]
fn bidx(mode: Broadcast, i: usize, cols: usize) -> usize {
    match mode {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(xr) {
            *o = (v - max).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

/// Row-wise softmax of a plain tensor, without recording anything.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (r, c) = mat(x, "softmax")?;
    Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), r, c))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id), true)
    }

    /// Embedding lookup straight from a parameter table; the gradient is
    /// scattered back to the selected rows only.
    pub fn param_rows(&mut self, params: &ParamSet, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = params.value(id);
        let (n, cols) = mat(table, "param_rows")?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "param_rows",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(&table.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(value, Op::ParamRows(id, rows.to_vec()), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat(self.value(a), "matmul")?;
        let (k2, n) = mat(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} × {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = mat(self.value(a), "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        allow_col: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = broadcast_mode(av, bv, op, allow_col)?;
        let cols = av.dims2().map_or(1, |d| d.1);
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, bd[bidx(mode, i, cols)]))
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, mode))
    }

    /// Elementwise sum; `b` may be a row vector or scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary(a, b, "add", true, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, mode), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary(a, b, "sub", true, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, mode), rg))
    }

    /// Elementwise product; `b` may broadcast as a row, a column, or a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary(a, b, "mul", true, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, mode), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Argument("concat of zero tensors".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| mat(self.value(*p), "concat"))
            .collect::<Result<_>>()?;
        let t = match axis {
            0 => {
                let cols = dims[0].1;
                if let Some(bad) = dims.iter().find(|d| d.1 != cols) {
                    return Err(shape_err("concat", format!("column mismatch {} vs {}", bad.1, cols)));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(self.value(*p).data());
                }
                Tensor::matrix(rows, cols, data)?
            }
            1 => {
                let rows = dims[0].0;
                if let Some(bad) = dims.iter().find(|d| d.0 != rows) {
                    return Err(shape_err("concat", format!("row mismatch {} vs {}", bad.0, rows)));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (p, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.value(*p).data()[r * d.1..(r + 1) * d.1]);
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
            _ => return Err(TensorError::Argument(format!("concat axis {axis} unsupported"))),
        };
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = mat(self.value(a), "slice_rows")?;
        if start > end || end > r {
            return Err(shape_err("slice_rows", format!("range {start}..{end} of {r} rows")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(end - start, c, data)?, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = mat(self.value(a), "slice_cols")?;
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("range {start}..{end} of {c} columns")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r, end - start, data)?, Op::SliceCols(a, start), rg))
    }

    /// `out[i] = a[idx[i]]`, row-wise.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = mat(self.value(a), "gather_rows")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(idx.len(), c, data)?, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Row gather from an embedding table held on the tape.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `out[idx[i]] += a[i]` into an `n`-row zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (r, c) = mat(self.value(a), "scatter_add_rows")?;
        if idx.len() != r {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {r} rows", idx.len())));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(TensorError::Index {
                    op: "scatter_add_rows",
                    index: dst,
                    len: n,
                });
            }
            for (d, s) in data[dst * c..(dst + 1) * c].iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, c, data)?, Op::ScatterAddRows(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Argument("mean of empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Mean token cross-entropy of row-wise `softmax(logits)` against `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = mat(self.value(logits), "softmax_cross_entropy")?;
        if targets.len() != r || r == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let probs = softmax_rows(self.value(logits).data(), r, c);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    len: c,
                });
            }
            // log-sum-exp form keeps the loss finite when p underflows
            let row = &self.value(logits).data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= r as f64;
        let probs = Tensor::matrix(r, c, probs)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy(logits, targets.to_vec(), probs),
            rg,
        ))
    }

    /// Block-diagonal product over heads. `x` is `m × (g·h)`, `w` is `g × h × h`.
    /// Head `i` computes `x_i · w_i`, or `w_i · x_i` when `transpose_w` is set.
    pub fn head_matmul(&mut self, x: Var, w: Var, transpose_w: bool) -> Result<Var> {
        let (m, d) = mat(self.value(x), "head_matmul")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != ws[2] || ws[0] * ws[1] != d {
            return Err(shape_err(
                "head_matmul",
                format!("x {:?} with head weights {:?}", self.value(x).shape(), ws),
            ));
        }
        let (g, h) = (ws[0], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            for head in 0..g {
                let xs = &xd[r * d + head * h..r * d + (head + 1) * h];
                let wh = &wd[head * h * h..(head + 1) * h * h];
                let os = &mut out[r * d + head * h..r * d + (head + 1) * h];
                if transpose_w {
                    for (j, o) in os.iter_mut().enumerate() {
                        *o = xs.iter().zip(&wh[j * h..(j + 1) * h]).map(|(a, b)| a * b).sum();
                    }
                } else {
                    for (i, &xv) in xs.iter().enumerate() {
                        for (o, wv) in os.iter_mut().zip(&wh[i * h..(i + 1) * h]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::matrix(m, d, out)?, Op::HeadMatMul(x, w, transpose_w), rg))
    }

    /// Per-head row dot products: `out[r, i] = <a_r,i , b_r,i>` over `heads` equal slices.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> Result<Var> {
        let (m, d) = mat(self.value(a), "head_dot")?;
        if self.value(a).shape() != self.value(b).shape() || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "head_dot",
                format!("{:?} · {:?} with {heads} heads", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let h = d / heads;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * heads];
        for r in 0..m {
            for head in 0..heads {
                let base = r * d + head * h;
                out[r * heads + head] = (0..h).map(|i| ad[base + i] * bd[base + i]).sum();
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, heads, out)?, Op::HeadDot(a, b), rg))
    }

    /// Scales each head slice of `x` (`m × d`) by the matching column of `weights` (`m × g`).
    pub fn head_scale(&mut self, weights: Var, x: Var) -> Result<Var> {
        let (m, g) = mat(self.value(weights), "head_scale")?;
        let (m2, d) = mat(self.value(x), "head_scale")?;
        if m != m2 || g == 0 || d % g != 0 {
            return Err(shape_err(
                "head_scale",
                format!("weights {:?} for x {:?}", self.value(weights).shape(), self.value(x).shape()),
            ));
        }
        let h = d / g;
        let (wd, xd) = (self.value(weights).data(), self.value(x).data());
        let out = (0..m * d)
            .map(|i| {
                let (r, c) = (i / d, i % d);
                wd[r * g + c / h] * xd[i]
            })
            .collect();
        let rg = self.rg(&[weights, x]);
        Ok(self.push(Tensor::matrix(m, d, out)?, Op::HeadScale(weights, x), rg))
    }

    /// Column-wise softmax within groups of rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let (m, c) = mat(self.value(a), "segment_softmax")?;
        if segments.len() != m {
            return Err(shape_err("segment_softmax", format!("{} segment ids for {m} rows", segments.len())));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(TensorError::Index {
                op: "segment_softmax",
                index: bad,
                len: n_segments,
            });
        }
        let x = self.value(a).data();
        let mut max = vec![f64::NEG_INFINITY; n_segments * c];
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let slot = &mut max[s * c + j];
                *slot = slot.max(x[r * c + j]);
            }
        }
        let mut out = vec![0.0; m * c];
        let mut z = vec![0.0; n_segments * c];
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let e = (x[r * c + j] - max[s * c + j]).exp();
                out[r * c + j] = e;
                z[s * c + j] += e;
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[r * c + j] /= z[s * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, c, out)?, Op::SegmentSoftmax(a, segments.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Argument("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => out.params.push((*id, Tensor::new(node.value.shape().to_vec(), g)?)),
                Op::ParamRows(id, rows) => {
                    out.param_rows
                        .push((*id, rows.clone(), Tensor::new(node.value.shape().to_vec(), g)?));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(a).dims2().unwrap();
                    let (_, n) = val(b).dims2().unwrap();
                    if needs(a) {
                        let bt = transpose_raw(val(b).data(), k, n);
                        add_into(&mut grads[a.0], &matmul_raw(&g, &bt, m, n, k));
                    }
                    if needs(b) {
                        let at = transpose_raw(val(a).data(), m, k);
                        add_into(&mut grads[b.0], &matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = val(a).dims2().unwrap();
                    add_into(&mut grads[a.0], &transpose_raw(&g, n, m));
                }
                Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if needs(b) {
                        let cols = val(a).dims2().map_or(1, |d| d.1);
                        let mut gb = vec![0.0; val(b).len()];
                        for (j, gv) in g.iter().enumerate() {
                            gb[bidx(*mode, j, cols)] += sign * gv;
                        }
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                Op::Mul(a, b, mode) => {
                    let cols = val(a).dims2().map_or(1, |d| d.1);
                    let (ad, bd) = (val(a).data(), val(b).data());
                    if needs(a) {
                        let ga: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(j, gv)| gv * bd[bidx(*mode, j, cols)])
                            .collect();
                        add_into(&mut grads[a.0], &ga);
                    }
                    if needs(b) {
                        let mut gb = vec![0.0; bd.len()];
                        for (j, gv) in g.iter().enumerate() {
                            gb[bidx(*mode, j, cols)] += gv * ad[j];
                        }
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Concat(parts, axis) => {
                    let (rows, cols) = node.value.dims2().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = val(p).dims2().unwrap();
                        if needs(p) {
                            let gp: Vec<f64> = if *axis == 0 {
                                g[offset * cols..(offset + pr) * cols].to_vec()
                            } else {
                                (0..rows)
                                    .flat_map(|r| g[r * cols + offset..r * cols + offset + pc].iter().copied())
                                    .collect()
                            };
                            add_into(&mut grads[p.0], &gp);
                        }
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::SliceRows(a, start) => {
                    let (_, c) = val(a).dims2().unwrap();
                    let mut ga = vec![0.0; val(a).len()];
                    ga[start * c..start * c + g.len()].copy_from_slice(&g);
                    add_into(&mut grads[a.0], &ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(a).dims2().unwrap();
                    let w = g.len() / r.max(1);
                    let mut ga = vec![0.0; val(a).len()];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                Op::GatherRows(a, idx) => {
                    let (_, c) = val(a).dims2().unwrap();
                    let mut ga = vec![0.0; val(a).len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, s) in ga[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += s;
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let (_, c) = val(a).dims2().unwrap();
                    let ga: Vec<f64> = idx
                        .iter()
                        .flat_map(|&dst| g[dst * c..(dst + 1) * c].iter().copied())
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Reshape(a) => add_into(&mut grads[a.0], &g),
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Log(a) => {
                    let ga: Vec<f64> = g.iter().zip(val(a).data()).map(|(gv, x)| gv / x).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Softmax(a) => {
                    let (r, c) = node.value.dims2().unwrap();
                    let y = node.value.data();
                    let mut ga = vec![0.0; y.len()];
                    for i in 0..r {
                        let s = i * c..(i + 1) * c;
                        let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                Op::Sum(a) => add_into(&mut grads[a.0], &vec![g[0]; val(a).len()]),
                Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    add_into(&mut grads[a.0], &vec![g[0] / n; val(a).len()]);
                }
                Op::SoftmaxCrossEntropy(a, targets, probs) => {
                    let (r, c) = probs.dims2().unwrap();
                    let scale = g[0] / r as f64;
                    let mut ga: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        ga[i * c + t] -= scale;
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                Op::HeadMatMul(x, w, transpose_w) => {
                    let (m, d) = val(x).dims2().unwrap();
                    let ws = val(w).shape();
                    let (heads, h) = (ws[0], ws[1]);
                    let (xd, wd) = (val(x).data(), val(w).data());
                    let mut gx = vec![0.0; xd.len()];
                    let mut gw = vec![0.0; wd.len()];
                    for r in 0..m {
                        for head in 0..heads {
                            let base = r * d + head * h;
                            let wb = head * h * h;
                            let xs = &xd[base..base + h];
                            let gy = &g[base..base + h];
                            let gxs = &mut gx[base..base + h];
                            for a in 0..h {
                                // row `a` of the stored head matrix
                                let wrow = &wd[wb + a * h..wb + (a + 1) * h];
                                let gwrow = &mut gw[wb + a * h..wb + (a + 1) * h];
                                if *transpose_w {
                                    let gya = gy[a];
                                    for ((gxi, gwi), (xi, wi)) in gxs.iter_mut().zip(gwrow.iter_mut()).zip(xs.iter().zip(wrow)) {
                                        *gxi += gya * wi;
                                        *gwi += gya * xi;
                                    }
                                } else {
                                    let xa = xs[a];
                                    let mut acc = 0.0;
                                    for ((gwj, wj), gyj) in gwrow.iter_mut().zip(wrow).zip(gy) {
                                        acc += gyj * wj;
                                        *gwj += xa * gyj;
                                    }
                                    gxs[a] += acc;
                                }
                            }
                        }
                    }
                    if needs(x) {
                        add_into(&mut grads[x.0], &gx);
                    }
                    if needs(w) {
                        add_into(&mut grads[w.0], &gw);
                    }
                }
                Op::HeadDot(a, b) => {
                    let (m, d) = val(a).dims2().unwrap();
                    let heads = node.value.dims2().unwrap().1;
                    let h = d / heads;
                    let (ad, bd) = (val(a).data(), val(b).data());
                    let go = |j: usize| g[(j / d) * heads + (j % d) / h];
                    if needs(a) {
                        let ga: Vec<f64> = (0..m * d).map(|j| go(j) * bd[j]).collect();
                        add_into(&mut grads[a.0], &ga);
                    }
                    if needs(b) {
                        let gb: Vec<f64> = (0..m * d).map(|j| go(j) * ad[j]).collect();
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                Op::HeadScale(w, x) => {
                    let (m, heads) = val(w).dims2().unwrap();
                    let d = val(x).dims2().unwrap().1;
                    let h = d / heads;
                    let (wd, xd) = (val(w).data(), val(x).data());
                    if needs(x) {
                        let gx: Vec<f64> = (0..m * d).map(|j| g[j] * wd[(j / d) * heads + (j % d) / h]).collect();
                        add_into(&mut grads[x.0], &gx);
                    }
                    if needs(w) {
                        let mut gw = vec![0.0; m * heads];
                        for j in 0..m * d {
                            gw[(j / d) * heads + (j % d) / h] += g[j] * xd[j];
                        }
                        add_into(&mut grads[w.0], &gw);
                    }
                }
                Op::SegmentSoftmax(a, segments) => {
                    let (_, c) = node.value.dims2().unwrap();
                    let y = node.value.data();
                    let n_seg = segments.iter().copied().max().map_or(0, |s| s + 1);
                    let mut dot = vec![0.0; n_seg * c];
                    for (r, &s) in segments.iter().enumerate() {
                        for j in 0..c {
                            dot[s * c + j] += y[r * c + j] * g[r * c + j];
                        }
                    }
                    let mut ga = vec![0.0; y.len()];
                    for (r, &s) in segments.iter().enumerate() {
                        for j in 0..c {
                            let k = r * c + j;
                            ga[k] = y[k] * (g[k] - dot[s * c + j]);
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
            }
        }
        Ok(out)
    }
}
