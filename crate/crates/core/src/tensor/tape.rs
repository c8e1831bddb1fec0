use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::dense::{check_labels, BinaryOp, Broadcast, Mode, Tensor};
use crate::error::{dim_err, Error, Result};

/// Integer cell rectangle `[x1, x2) × [y1, y2)` used by box pooling.
pub type CellRect = [usize; 4];

/// Records differentiable operations in execution order.
///
/// Node indices grow monotonically, so the node vector is already a
/// topological order and the backward sweep is a reverse scan.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SmoothL1 {
        pred: usize,
        target: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    BoxMeanPool {
        fm: usize,
        width: usize,
        boxes: Vec<CellRect>,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar loss, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a tensor on the tape; it participates in differentiation when
    /// its `grad_enabled` flag is set.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let requires_grad = t.grad_enabled();
        self.push_raw(t, requires_grad, Op::Leaf)
    }

    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_grad(false))
    }

    fn push_raw(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, inputs: &[usize], op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::MissingTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let gt = Tensor::new(out.shape().to_vec(), g.clone())?;
                    if needs(*a) {
                        acc(&mut grads, *a, gt.matmul_t(val(*b))?.into_values());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, val(*a).t_matmul(&gt)?.into_values());
                    }
                }
                Op::MatMulT(a, b) => {
                    let gt = Tensor::new(out.shape().to_vec(), g.clone())?;
                    if needs(*a) {
                        acc(&mut grads, *a, gt.matmul(val(*b))?.into_values());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, gt.t_matmul(val(*a))?.into_values());
                    }
                }
                Op::Transpose(a) => {
                    let gt = Tensor::new(out.shape().to_vec(), g.clone())?;
                    acc(&mut grads, *a, gt.transpose()?.into_values());
                }
                Op::Binary { op, a, b, bcast } => {
                    let av = val(*a).values();
                    let bv = val(*b).values();
                    let c = out.cols().max(1);
                    let b_at = |i: usize| match bcast {
                        Broadcast::Same => bv[i],
                        Broadcast::Scalar => bv[0],
                        Broadcast::Row => bv[i % c],
                    };
                    if needs(*a) {
                        let ga = match op {
                            BinaryOp::Add | BinaryOp::Sub => g.clone(),
                            BinaryOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * b_at(i)).collect(),
                        };
                        acc(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let per: Vec<f64> = match op {
                            BinaryOp::Add => g.clone(),
                            BinaryOp::Sub => g.iter().map(|v| -v).collect(),
                            BinaryOp::Mul => g.iter().zip(av).map(|(gi, ai)| gi * ai).collect(),
                        };
                        let gb = match bcast {
                            Broadcast::Same => per,
                            Broadcast::Scalar => vec![per.iter().sum()],
                            Broadcast::Row => {
                                let mut s = vec![0.0; c];
                                for (i, v) in per.iter().enumerate() {
                                    s[i % c] += v;
                                }
                                s
                            }
                        };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.iter().map(|v| v * s).collect()),
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(out.values())
                        .map(|(gi, y)| if *y > 0.0 { *gi } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let n = out.cols();
                    let y = out.values();
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..out.rows() {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = out.cols();
                    let gam = val(*gamma).values();
                    if needs(*gamma) {
                        let mut gg = vec![0.0; d];
                        for (i, gi) in g.iter().enumerate() {
                            gg[i % d] += gi * xhat[i];
                        }
                        acc(&mut grads, *gamma, gg);
                    }
                    if needs(*beta) {
                        let mut gb = vec![0.0; d];
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % d] += gi;
                        }
                        acc(&mut grads, *beta, gb);
                    }
                    if needs(*x) {
                        let mut gx = vec![0.0; g.len()];
                        let df = d as f64;
                        for (r, inv) in inv_std.iter().enumerate() {
                            let s = r * d..(r + 1) * d;
                            let dxhat: Vec<f64> = s.clone().map(|i| g[i] * gam[i - r * d]).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(&xhat[s.clone()]).map(|(a, b)| a * b).sum();
                            for (j, i) in s.enumerate() {
                                gx[i] = inv / df * (df * dxhat[j] - sum_d - xhat[i] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Dropout { x, mask } => {
                    acc(&mut grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect())
                }
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    acc(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let m = val(*a).rows();
                    let inv = 1.0 / m as f64;
                    let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                    acc(&mut grads, *a, row.repeat(m));
                }
                Op::SmoothL1 { pred, target } => {
                    let p = val(*pred).values();
                    let t = val(*target).values();
                    let scale = g[0] / p.len() as f64;
                    let d: Vec<f64> = p
                        .iter()
                        .zip(t)
                        .map(|(a, b)| {
                            let x = a - b;
                            scale * if x.abs() < 1.0 { x } else { x.signum() }
                        })
                        .collect();
                    if needs(*target) {
                        acc(&mut grads, *target, d.iter().map(|v| -v).collect());
                    }
                    if needs(*pred) {
                        acc(&mut grads, *pred, d);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = probs.cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.values().iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * c + y] -= scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::ConcatCols(parts) => {
                    let m = out.rows();
                    let n = out.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if needs(p) {
                            let mut gp = Vec::with_capacity(m * w);
                            for r in 0..m {
                                gp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).numel();
                        if needs(p) {
                            acc(&mut grads, p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::SelectRows { x, idx } => {
                    let n = out.cols();
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g[r * n + j];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BoxMeanPool { fm, width, boxes } => {
                    let d = out.cols();
                    let mut gx = vec![0.0; val(*fm).numel()];
                    for (r, b) in boxes.iter().enumerate() {
                        let inv = 1.0 / ((b[2] - b[0]) * (b[3] - b[1])) as f64;
                        let grow = &g[r * d..(r + 1) * d];
                        for y in b[1]..b[3] {
                            for x in b[0]..b[2] {
                                let cell = (y * width + x) * d;
                                for (o, v) in gx[cell..cell + d].iter_mut().zip(grow) {
                                    *o += v * inv;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *fm, gx);
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|v| Tensor::new(nodes[id].value.shape().to_vec(), v).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value())?;
        self.tape.push("matmul", v, &[self.id, other.id], Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = self.value().matmul_t(&other.value())?;
        self.tape.push("matmul_t", v, &[self.id, other.id], Op::MatMulT(self.id, other.id))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        self.tape.push("transpose", v, &[self.id], Op::Transpose(self.id))
    }

    pub fn elementwise(&self, op: BinaryOp, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let bcast = a.broadcast_kind(&b)?;
        let v = a.elementwise(op, &b)?;
        self.tape.push(
            "elementwise",
            v,
            &[self.id, other.id],
            Op::Binary {
                op,
                a: self.id,
                b: other.id,
                bcast,
            },
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let v = self.value().scale(s);
        self.tape.push("scale", v, &[self.id], Op::Scale(self.id, s))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let v = self.value().relu();
        self.tape.push("relu", v, &[self.id], Op::Relu(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value().softmax_rows()?;
        self.tape.push("softmax_rows", v, &[self.id], Op::SoftmaxRows(self.id))
    }

    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (v, xhat, inv_std) = self
            .value()
            .layer_norm_parts(&gamma.value(), &beta.value(), eps)?;
        self.tape.push(
            "layer_norm",
            v,
            &[self.id, gamma.id, beta.id],
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout; the identity (same node) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, mode: Mode, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let mask = Tensor::dropout_mask(x.numel(), rate, rng)?;
        let v = Tensor::new(
            x.shape().to_vec(),
            x.values().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        self.tape
            .push("dropout", v, &[self.id], Op::Dropout { x: self.id, mask })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push("sum", v, &[self.id], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().mean()?);
        self.tape.push("mean", v, &[self.id], Op::Mean(self.id))
    }

    /// Column means as a `1×d` matrix.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let v = self.value().mean_rows()?;
        self.tape.push("mean_rows", v, &[self.id], Op::MeanRows(self.id))
    }

    pub fn smooth_l1(&self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&target);
        let v = Tensor::scalar(self.value().smooth_l1(&target.value())?);
        self.tape.push(
            "smooth_l1",
            v,
            &[self.id, target.id],
            Op::SmoothL1 {
                pred: self.id,
                target: target.id,
            },
        )
    }

    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let (m, c) = logits.dims2()?;
        check_labels(m, c, labels)?;
        let probs = logits.softmax_rows()?;
        let v = Tensor::scalar(logits.cross_entropy(labels)?);
        self.tape.push(
            "cross_entropy",
            v,
            &[self.id],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value().select_rows(idx)?;
        self.tape.push(
            "select_rows",
            v,
            &[self.id],
            Op::SelectRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        parts.iter().for_each(|p| first.same_tape(p));
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_cols(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat_cols", v, &ids, Op::ConcatCols(ids.clone()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        parts.iter().for_each(|p| first.same_tape(p));
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat_rows", v, &ids, Op::ConcatRows(ids.clone()))
    }

    /// Mean-pools the rows of an `H·W × d` grid (row-major cells) over each
    /// rectangle `[x1, y1, x2, y2)`.
    pub fn box_mean_pool(&self, height: usize, width: usize, boxes: &[CellRect]) -> Result<Var<'t>> {
        let fm = self.value();
        let (cells, d) = fm.dims2()?;
        if cells != height * width {
            return dim_err(format!("{cells} rows for a {height}x{width} grid"));
        }
        let mut out = Vec::with_capacity(boxes.len() * d);
        for b in boxes {
            if b[0] >= b[2] || b[1] >= b[3] || b[2] > width || b[3] > height {
                return Err(Error::Bounds(format!(
                    "box {b:?} outside {width}x{height} grid or empty"
                )));
            }
            let start = out.len();
            out.resize(start + d, 0.0);
            for y in b[1]..b[3] {
                for x in b[0]..b[2] {
                    for (o, v) in out[start..].iter_mut().zip(fm.row(y * width + x)) {
                        *o += v;
                    }
                }
            }
            let inv = 1.0 / ((b[2] - b[0]) * (b[3] - b[1])) as f64;
            for o in &mut out[start..] {
                *o *= inv;
            }
        }
        let v = Tensor::matrix(boxes.len(), d, out)?;
        self.tape.push(
            "box_mean_pool",
            v,
            &[self.id],
            Op::BoxMeanPool {
                fm: self.id,
                width,
                boxes: boxes.to_vec(),
            },
        )
    }
}
