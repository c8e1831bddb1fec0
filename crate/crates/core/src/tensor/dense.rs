use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Dense row-major `f64` array.
///
/// Tensors are values: every operation returns a new tensor. The
/// `grad_enabled` flag only matters when the tensor is placed on a
/// [`Tape`](super::Tape) as a leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    grad_enabled: bool,
}

/// Binary pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    Scalar,
    /// Right operand is a vector along the last axis of the left operand.
    Row,
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad_enabled: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            values.extend_from_slice(r.as_ref());
        }
        Tensor {
            shape: vec![rows.len(), cols],
            values,
            grad_enabled: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad_enabled: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
            grad_enabled: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; n],
            grad_enabled: false,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            grad_enabled: false,
        }
    }

    pub fn with_grad(mut self, enabled: bool) -> Self {
        self.grad_enabled = enabled;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return dim_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.values[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.values[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return dim_err(format!("matmul_t {m}x{k} by ({n}x{k2})ᵀ"));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.values[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.values[j * k..(j + 1) * k];
                out.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return dim_err(format!("t_matmul ({k}x{m})ᵀ by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.values[p * m..(p + 1) * m];
            let brow = &other.values[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.values[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub(crate) fn broadcast_kind(&self, other: &Tensor) -> Result<Broadcast> {
        if self.shape == other.shape {
            Ok(Broadcast::Same)
        } else if other.numel() == 1 && other.shape.iter().all(|&s| s == 1) {
            Ok(Broadcast::Scalar)
        } else if !self.shape.is_empty()
            && other.numel() == self.cols()
            && other.shape.last() == Some(&self.cols())
            && other.shape.iter().rev().skip(1).all(|&s| s == 1)
        {
            Ok(Broadcast::Row)
        } else {
            dim_err(format!(
                "cannot broadcast {:?} onto {:?}",
                other.shape, self.shape
            ))
        }
    }

    /// Pointwise `self op other`, where `other` has the same shape, is a
    /// scalar, or is a vector along the last axis.
    pub fn elementwise(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let kind = self.broadcast_kind(other)?;
        let c = self.cols().max(1);
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = match kind {
                    Broadcast::Same => other.values[i],
                    Broadcast::Scalar => other.values[0],
                    Broadcast::Row => other.values[i % c],
                };
                op.apply(a, b)
            })
            .collect();
        Tensor::new(self.shape.clone(), values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad_enabled: false,
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> Result<f64> {
        if self.values.is_empty() {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        Ok(self.sum() / self.values.len() as f64)
    }

    /// Column-wise mean of a matrix, as a `1×d` matrix.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if m == 0 {
            return Err(Error::EmptyInput("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        Tensor::matrix(1, n, out.into_iter().map(|v| v * inv).collect())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if n == 0 {
            return dim_err("softmax over empty rows");
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - max).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Row-wise layer normalization. Returns the output together with the
    /// normalized activations and per-row inverse standard deviations, which
    /// the tape keeps for the backward pass.
    pub(crate) fn layer_norm_parts(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, d) = self.dims2()?;
        if gamma.numel() != d || beta.numel() != d {
            return dim_err(format!(
                "layer_norm width {d} vs gamma {:?} / beta {:?}",
                gamma.shape, beta.shape
            ));
        }
        let mut out = Vec::with_capacity(m * d);
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gamma.values[j] + beta.values[j]);
            }
        }
        Ok((Tensor::matrix(m, d, out)?, xhat, inv_std))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.layer_norm_parts(gamma, beta, eps).map(|p| p.0)
    }

    /// Inverted dropout mask: zero with probability `rate`, `1/(1-rate)` otherwise.
    pub fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        Ok((0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect())
    }

    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self.clone().with_grad(false));
        }
        let mask = Self::dropout_mask(self.numel(), rate, rng)?;
        Tensor::new(
            self.shape.clone(),
            self.values.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )
    }

    /// Mean smooth-L1 over all elements.
    pub fn smooth_l1(&self, target: &Tensor) -> Result<f64> {
        if self.shape != target.shape {
            return dim_err(format!("smooth_l1 {:?} vs {:?}", self.shape, target.shape));
        }
        if self.values.is_empty() {
            return Err(Error::EmptyInput("smooth_l1 of empty tensors".into()));
        }
        let s: f64 = self
            .values
            .iter()
            .zip(&target.values)
            .map(|(p, t)| smooth_l1_value(p - t))
            .sum();
        Ok(s / self.numel() as f64)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<f64> {
        let (m, c) = self.dims2()?;
        check_labels(m, c, labels)?;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = self.row(i);
            total += log_sum_exp(row) - row[y];
        }
        Ok(total / m as f64)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index(format!("row {i} of {m}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), n, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let n = parts.first().map_or(0, |p| p.cols());
        let mut values = Vec::new();
        let mut m = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != n {
                return dim_err(format!("concat_rows width {c} vs {n}"));
            }
            m += r;
            values.extend_from_slice(&p.values);
        }
        Tensor::matrix(m, n, values)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let m = parts.first().map_or(0, |p| p.rows());
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != m {
                return dim_err(format!("concat_cols height {r} vs {m}"));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                values.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(m, n, values)
    }
}

#[inline]
pub(crate) fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_labels(m: usize, c: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != m {
        return dim_err(format!("{} labels for {m} rows", labels.len()));
    }
    if m == 0 {
        return Err(Error::EmptyInput("cross_entropy over zero rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index(format!("label {bad} with {c} classes")));
    }
    Ok(())
}
