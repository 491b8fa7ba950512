use std::sync::Arc;

use super::kernels::gemm;
use super::{Result, Tensor, TensorError};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at 0 is taken as 1.
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MulScalar(Tensor, f64),
    AddRowBias(Tensor, Tensor),
    AddScalar(Tensor, Tensor),
    ScaleRows(Tensor, Tensor),
    ConcatColumns(Vec<Tensor>),
    StackRows(Vec<Tensor>),
    GatherRows(Tensor, Arc<[usize]>),
    Activation(Tensor, Activation),
    SegmentSoftmax(Tensor, Arc<[usize]>),
    SegmentSum(Tensor, Arc<[usize]>),
    /// Source element per output cell; `usize::MAX` marks an empty segment.
    SegmentMax(Tensor, Vec<usize>),
    Sum(Tensor),
    Mse(Tensor, Tensor),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddScalar(a, b)
            | Op::ScaleRows(a, b)
            | Op::Mse(a, b) => vec![a, b],
            Op::ConcatColumns(ts) | Op::StackRows(ts) => ts.iter().collect(),
            Op::MulScalar(a, _)
            | Op::GatherRows(a, _)
            | Op::Activation(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::SegmentSum(a, _)
            | Op::SegmentMax(a, _)
            | Op::Sum(a) => vec![a],
        }
    }

    /// Vector-Jacobian product: given the output gradient `g` (and the
    /// forward output `out`), emits one gradient contribution per input that
    /// requires it.
    pub(crate) fn backward(&self, g: &[f64], out: &[f64], out_cols: usize, emit: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = a.shape();
                let n = b.cols();
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b.data(), true, &mut da, 0.0);
                    emit(a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &a.data(), true, g, false, &mut db, 0.0);
                    emit(b, db);
                }
            }
            Op::Add(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    emit(a, g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect());
                }
                if b.requires_grad() {
                    let ad = a.data();
                    emit(b, g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect());
                }
            }
            Op::MulScalar(a, c) => emit(a, g.iter().map(|x| x * c).collect()),
            Op::AddRowBias(x, bias) => {
                emit(x, g.to_vec());
                if bias.requires_grad() {
                    let mut db = vec![0.0; out_cols];
                    for row in g.chunks(out_cols) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    emit(bias, db);
                }
            }
            Op::AddScalar(x, s) => {
                emit(x, g.to_vec());
                emit(s, vec![g.iter().sum()]);
            }
            Op::ScaleRows(x, s) => {
                let d = out_cols;
                if x.requires_grad() {
                    let sd = s.data();
                    let mut dx = g.to_vec();
                    for (row, sv) in dx.chunks_mut(d.max(1)).zip(sd.iter()) {
                        row.iter_mut().for_each(|v| *v *= sv);
                    }
                    emit(x, dx);
                }
                if s.requires_grad() {
                    let xd = x.data();
                    let ds = g
                        .chunks(d.max(1))
                        .zip(xd.chunks(d.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    emit(s, ds);
                }
            }
            Op::ConcatColumns(parts) => {
                let rows = if out_cols == 0 { 0 } else { g.len() / out_cols };
                let mut offset = 0;
                for p in parts {
                    let pc = p.cols();
                    if p.requires_grad() {
                        let mut dp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * out_cols + offset..r * out_cols + offset + pc]);
                        }
                        emit(p, dp);
                    }
                    offset += pc;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.len();
                    if p.requires_grad() {
                        emit(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::GatherRows(x, index) => {
                let d = out_cols;
                let mut dx = vec![0.0; x.len()];
                for (k, &r) in index.iter().enumerate() {
                    let src = &g[k * d..(k + 1) * d];
                    dx[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                emit(x, dx);
            }
            Op::Activation(x, kind) => {
                let xd = x.data();
                let dx = g
                    .iter()
                    .zip(xd.iter().zip(out))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                emit(x, dx);
            }
            Op::SegmentSoftmax(x, segments) => {
                let n_seg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&s, gv), yv) in segments.iter().zip(g).zip(out) {
                    dot[s] += gv * yv;
                }
                let dx = segments
                    .iter()
                    .zip(g.iter().zip(out))
                    .map(|(&s, (gv, yv))| yv * (gv - dot[s]))
                    .collect();
                emit(x, dx);
            }
            Op::SegmentSum(x, segments) => {
                let d = out_cols;
                let mut dx = Vec::with_capacity(x.len());
                for &s in segments.iter() {
                    dx.extend_from_slice(&g[s * d..(s + 1) * d]);
                }
                emit(x, dx);
            }
            Op::SegmentMax(x, source) => {
                let mut dx = vec![0.0; x.len()];
                for (cell, &src) in source.iter().enumerate() {
                    if src != usize::MAX {
                        dx[src] += g[cell];
                    }
                }
                emit(x, dx);
            }
            Op::Sum(x) => emit(x, vec![g[0]; x.len()]),
            Op::Mse(pred, target) => {
                let n = pred.len() as f64;
                let pd = pred.data();
                let td = target.data();
                let dp: Vec<f64> = pd.iter().zip(td.iter()).map(|(p, t)| 2.0 * (p - t) / n * g[0]).collect();
                if target.requires_grad() {
                    emit(target, dp.iter().map(|x| -x).collect());
                }
                if pred.requires_grad() {
                    emit(pred, dp);
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

fn check_segments(op: &'static str, segments: &[usize], n_segments: usize) -> Result<()> {
    match segments.iter().find(|&&s| s >= n_segments) {
        Some(&id) => Err(TensorError::SegmentOutOfRange { op, id, n_segments }),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, 0.0);
        Ok(Tensor::from_op(m, n, out, Op::MatMul(self.clone(), other.clone())))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        same_shape(op, self, other)?;
        let a = self.data();
        let b = other.data();
        Ok(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(self.rows(), self.cols(), out, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(self.rows(), self.cols(), out, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(self.rows(), self.cols(), out, Op::Mul(self.clone(), other.clone())))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::MulScalar(self.clone(), c))
    }

    /// Adds a `1 x d` row to every row of an `n x d` matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != self.cols() {
            return Err(TensorError::Shape { op: "add_row_bias", left: self.shape(), right: bias.shape() });
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_mut(self.cols().max(1)) {
            row.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
        }
        drop(b);
        Ok(Tensor::from_op(self.rows(), self.cols(), out, Op::AddRowBias(self.clone(), bias.clone())))
    }

    /// Adds a `1 x 1` tensor to every element.
    pub fn add_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(TensorError::Shape { op: "add_scalar", left: self.shape(), right: s.shape() });
        }
        let v = s.item();
        let out = self.data().iter().map(|x| x + v).collect();
        Ok(Tensor::from_op(self.rows(), self.cols(), out, Op::AddScalar(self.clone(), s.clone())))
    }

    /// Multiplies row `e` of an `n x d` matrix by `scale[e]` (`scale` is `n x 1`).
    pub fn scale_rows(&self, scale: &Tensor) -> Result<Tensor> {
        if scale.cols() != 1 || scale.rows() != self.rows() {
            return Err(TensorError::Shape { op: "scale_rows", left: self.shape(), right: scale.shape() });
        }
        let d = self.cols();
        let s = scale.data();
        let mut out = self.to_vec();
        if d > 0 {
            for (row, sv) in out.chunks_mut(d).zip(s.iter()) {
                row.iter_mut().for_each(|x| *x *= sv);
            }
        }
        drop(s);
        Ok(Tensor::from_op(self.rows(), d, out, Op::ScaleRows(self.clone(), scale.clone())))
    }

    /// Rows selected (with repetition) by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        self.gather_rows_shared(Arc::from(index))
    }

    pub(crate) fn gather_rows_shared(&self, index: Arc<[usize]>) -> Result<Tensor> {
        let (rows, d) = self.shape();
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: bad, rows });
        }
        let data = self.data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &r in index.iter() {
            out.extend_from_slice(&data[r * d..(r + 1) * d]);
        }
        drop(data);
        Ok(Tensor::from_op(index.len(), d, out, Op::GatherRows(self.clone(), index)))
    }

    /// Contiguous row range `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let index: Vec<usize> = (start..end).collect();
        self.gather_rows(&index)
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        let out = self.data().iter().map(|&x| kind.apply(x)).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Activation(self.clone(), kind))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.activation(Activation::LeakyRelu(slope))
    }

    pub fn tanh(&self) -> Tensor {
        self.activation(Activation::Tanh)
    }

    /// Sum of all elements as a `1 x 1` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(1, 1, vec![s], Op::Sum(self.clone()))
    }

    /// Mean squared error `(1/n) * sum (pred - target)^2` as a `1 x 1` tensor.
    pub fn mse_loss(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse_loss", self, target)?;
        if self.is_empty() {
            return Err(TensorError::Empty("mse_loss"));
        }
        let n = self.len() as f64;
        let s: f64 = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(Tensor::from_op(1, 1, vec![s / n], Op::Mse(self.clone(), target.clone())))
    }
}

/// Column-wise concatenation of matrices that share their row count.
pub fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Empty("concat_columns"))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let rows = first.rows();
    if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
        return Err(TensorError::Shape { op: "concat_columns", left: first.shape(), right: bad.shape() });
    }
    let cols: usize = parts.iter().map(Tensor::cols).sum();
    let guards: Vec<_> = parts.iter().map(Tensor::data).collect();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (p, d) in parts.iter().zip(&guards) {
            let c = p.cols();
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
    }
    drop(guards);
    Ok(Tensor::from_op(rows, cols, out, Op::ConcatColumns(parts.to_vec())))
}

/// Vertical concatenation of matrices that share their column count.
pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Empty("stack_rows"))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let cols = first.cols();
    if let Some(bad) = parts.iter().find(|p| p.cols() != cols) {
        return Err(TensorError::Shape { op: "stack_rows", left: first.shape(), right: bad.shape() });
    }
    let rows: usize = parts.iter().map(Tensor::rows).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    Ok(Tensor::from_op(rows, cols, out, Op::StackRows(parts.to_vec())))
}

/// Softmax of an `E x 1` score column taken separately within each segment.
pub fn segment_softmax(scores: &Tensor, segment_of: &[usize]) -> Result<Tensor> {
    segment_softmax_shared(scores, Arc::from(segment_of))
}

pub(crate) fn segment_softmax_shared(scores: &Tensor, segments: Arc<[usize]>) -> Result<Tensor> {
    if segments.is_empty() {
        return Err(TensorError::Empty("segment_softmax"));
    }
    if scores.cols() != 1 || scores.rows() != segments.len() {
        return Err(TensorError::Shape {
            op: "segment_softmax",
            left: scores.shape(),
            right: (segments.len(), 1),
        });
    }
    let n_seg = segments.iter().max().map_or(0, |m| m + 1);
    let x = scores.data();
    let mut max = vec![f64::NEG_INFINITY; n_seg];
    for (&s, &v) in segments.iter().zip(x.iter()) {
        if v > max[s] {
            max[s] = v;
        }
    }
    let mut out: Vec<f64> = segments.iter().zip(x.iter()).map(|(&s, &v)| (v - max[s]).exp()).collect();
    let mut total = vec![0.0; n_seg];
    for (&s, &e) in segments.iter().zip(&out) {
        total[s] += e;
    }
    for (&s, e) in segments.iter().zip(out.iter_mut()) {
        *e /= total[s];
    }
    drop(x);
    Ok(Tensor::from_op(scores.rows(), 1, out, Op::SegmentSoftmax(scores.clone(), segments)))
}

/// Row `i` of the result is the sum of the input rows assigned to segment `i`;
/// segments that receive no rows are zero.
pub fn segment_sum(values: &Tensor, segment_of: &[usize], n_segments: usize) -> Result<Tensor> {
    segment_sum_shared(values, Arc::from(segment_of), n_segments)
}

pub(crate) fn segment_sum_shared(values: &Tensor, segments: Arc<[usize]>, n_segments: usize) -> Result<Tensor> {
    if segments.len() != values.rows() {
        return Err(TensorError::Shape {
            op: "segment_sum",
            left: values.shape(),
            right: (segments.len(), values.cols()),
        });
    }
    check_segments("segment_sum", &segments, n_segments)?;
    let d = values.cols();
    let x = values.data();
    let mut out = vec![0.0; n_segments * d];
    for (e, &s) in segments.iter().enumerate() {
        out[s * d..(s + 1) * d].iter_mut().zip(&x[e * d..(e + 1) * d]).for_each(|(o, v)| *o += v);
    }
    drop(x);
    Ok(Tensor::from_op(n_segments, d, out, Op::SegmentSum(values.clone(), segments)))
}

/// Column-wise maximum within each segment; empty segments are zero.
pub fn segment_max(values: &Tensor, segment_of: &[usize], n_segments: usize) -> Result<Tensor> {
    if segment_of.len() != values.rows() {
        return Err(TensorError::Shape {
            op: "segment_max",
            left: values.shape(),
            right: (segment_of.len(), values.cols()),
        });
    }
    check_segments("segment_max", segment_of, n_segments)?;
    let d = values.cols();
    let x = values.data();
    let mut source = vec![usize::MAX; n_segments * d];
    for (e, &s) in segment_of.iter().enumerate() {
        for c in 0..d {
            let cell = s * d + c;
            let src = e * d + c;
            if source[cell] == usize::MAX || x[src] > x[source[cell]] {
                source[cell] = src;
            }
        }
    }
    let out = source.iter().map(|&src| if src == usize::MAX { 0.0 } else { x[src] }).collect();
    drop(x);
    Ok(Tensor::from_op(n_segments, d, out, Op::SegmentMax(values.clone(), source)))
}
