use super::DTensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// y = a * x + b, elementwise; only the scale enters the gradient.
    Affine(TensorId, f64),
    Transpose(TensorId),
    Reshape(TensorId),
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    /// [1 x n] stacked into [m x n].
    BroadcastRows(TensorId, usize),
    /// Saves the output row-distributions for the backward pass.
    SoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sigmoid(TensorId),
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Clamp(TensorId, f64, f64),
    SumAll(TensorId),
    MeanAll(TensorId),
    /// Mean over rows: [m x n] -> [1 x n].
    MeanRows(TensorId),
    /// Mean elementwise binary cross entropy with clamped predictions.
    Bce {
        pred: TensorId,
        target: TensorId,
        eps: f64,
    },
}

struct Node {
    value: DTensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Dynamic compute graph: an append-only record of operations, replayed in
/// reverse by [`Tape::backward`]. Nodes are topologically ordered by
/// construction, so the reverse sweep visits each exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DTensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Inserts a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: DTensor) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Inserts a non-differentiable leaf (data, masks, targets).
    pub fn constant(&mut self, value: DTensor) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &DTensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- recorded operations ------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, p) = self.value(a).dims2()?;
        let (p2, q) = self.value(b).dims2()?;
        if p != p2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_plain(self.value(a).data(), m, p, self.value(b).data(), q);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(DTensor::new(vec![m, q], out)?, rg, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("elementwise op", self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(DTensor::new(shape, data)?, rg, op))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: TensorId, scale: f64, shift: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(
            DTensor::new(shape, data).expect("same shape"),
            rg,
            Op::Affine(x, scale),
        )
    }

    pub fn scale(&mut self, x: TensorId, scale: f64) -> TensorId {
        self.affine(x, scale, 0.0)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(DTensor::new(vec![n, m], out)?, rg, Op::Transpose(x)))
    }

    /// Reinterprets the flat data under a new shape (row-major, free).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(DTensor::new(shape, data)?, rg, Op::Reshape(x)))
    }

    /// Concatenates rank-2 tensors along the last axis.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Validation("concat_cols of zero tensors".into()));
        }
        let (m, _) = self.value(xs[0]).dims2()?;
        let mut total = 0;
        for &x in xs {
            let (mi, ni) = self.value(x).dims2()?;
            if mi != m {
                return Err(Error::shape("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            total += ni;
        }
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for &x in xs {
            let (_, ni) = self.value(x).dims2()?;
            let src = self.value(x).data();
            for i in 0..m {
                out[i * total + col..i * total + col + ni]
                    .copy_from_slice(&src[i * ni..(i + 1) * ni]);
            }
            col += ni;
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(
            DTensor::new(vec![m, total], out)?,
            rg,
            Op::ConcatCols(xs.to_vec()),
        ))
    }

    /// Stacks rank-2 tensors along the first axis.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Validation("concat_rows of zero tensors".into()));
        }
        let (_, n) = self.value(xs[0]).dims2()?;
        let mut total = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (mi, ni) = self.value(x).dims2()?;
            if ni != n {
                return Err(Error::shape("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            total += mi;
            out.extend_from_slice(self.value(x).data());
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(
            DTensor::new(vec![total, n], out)?,
            rg,
            Op::ConcatRows(xs.to_vec()),
        ))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > m {
            return Err(Error::Validation(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            DTensor::new(vec![end - start, n], data)?,
            rg,
            Op::SliceRows(x, start, end),
        ))
    }

    /// Repeats a [1 x n] row vector into an [m x n] matrix.
    pub fn broadcast_rows(&mut self, x: TensorId, m: usize) -> Result<TensorId> {
        let (one, n) = self.value(x).dims2()?;
        if one != 1 {
            return Err(Error::Validation(format!(
                "broadcast_rows expects a [1 x n] input, got {:?}",
                self.shape(x)
            )));
        }
        let row = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            DTensor::new(vec![m, n], out)?,
            rg,
            Op::BroadcastRows(x, m),
        ))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows input contains a non-finite entry".into(),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(DTensor::new(vec![m, n], out)?, rg, Op::SoftmaxRows(x)))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain` and
    /// `bias` (both rank-1 of length n). Variance epsilon is 1e-5.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.value(x).dims2()?;
        if self.shape(gain) != [n] {
            return Err(Error::shape("layer_norm gain", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm bias", self.shape(x), self.shape(bias)));
        }
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * istd;
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = g[j] * xhat[i * n + j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(
            DTensor::new(vec![m, n], out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Affine layer: `x @ w` plus row-broadcast bias (rank-1 of length q).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let prod = self.matmul(x, w)?;
        let (m, q) = self.value(prod).dims2()?;
        if self.shape(b) != [q] {
            return Err(Error::shape("linear bias", self.shape(prod), self.shape(b)));
        }
        let b_row = self.reshape(b, vec![1, q])?;
        let b_full = self.broadcast_rows(b_row, m)?;
        self.add(prod, b_full)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    fn map(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(DTensor::new(shape, data).expect("same shape"), rg, op)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(DTensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel() as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        let rg = self.needs_grad(&[x]);
        self.push(DTensor::scalar(s), rg, Op::MeanAll(x))
    }

    /// Column means of a rank-2 tensor: [m x n] -> [1 x n].
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(DTensor::new(vec![1, n], out)?, rg, Op::MeanRows(x)))
    }

    /// Mean elementwise binary cross entropy. Predictions are clamped to
    /// [eps, 1-eps]; targets must be exactly 0 or 1.
    pub fn bce_loss(&mut self, pred: TensorId, target: TensorId, eps: f64) -> Result<TensorId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("bce_loss", self.shape(pred), self.shape(target)));
        }
        if self.value(target).data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(
                "bce_loss targets must be exactly 0 or 1".into(),
            ));
        }
        let n = self.value(pred).numel() as f64;
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            let pc = p.clamp(eps, 1.0 - eps);
            total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let rg = self.needs_grad(&[pred]);
        Ok(self.push(
            DTensor::scalar(total / n),
            rg,
            Op::Bce { pred, target, eps },
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Populates gradients of all `requires_grad` nodes with d(loss)/d(node).
    ///
    /// The loss must be a scalar recorded on this tape. Nodes that do not
    /// feed the loss receive zero gradients. Deterministic: the reverse sweep
    /// accumulates in a fixed order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any differentiable leaf; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let gy = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, p) = self.nodes[a.0].value.dims2()?;
                    let (_, q) = self.nodes[b.0].value.dims2()?;
                    if self.nodes[a.0].requires_grad {
                        let bd = self.nodes[b.0].value.data().to_vec();
                        // dA = dC . B^T
                        let da = matmul_a_bt(&gy, m, q, &bd, p);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        // dB = A^T . dC
                        let db = matmul_at_b(&ad, m, p, &gy, q);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &gy);
                    self.accumulate(b, &gy);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &gy);
                    let neg: Vec<f64> = gy.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let db: Vec<f64> = gy
                            .iter()
                            .zip(self.nodes[b.0].value.data())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(a, &db);
                    }
                    if self.nodes[b.0].requires_grad {
                        let da: Vec<f64> = gy
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(b, &da);
                    }
                }
                Op::Affine(x, a) => {
                    let (x, a) = (*x, *a);
                    let dx: Vec<f64> = gy.iter().map(|&g| a * g).collect();
                    self.accumulate(x, &dx);
                }
                Op::Transpose(x) => {
                    let x = *x;
                    let (m, n) = self.nodes[x.0].value.dims2()?;
                    // gy has shape [n x m]
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = gy[i * m + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    self.accumulate(x, &gy);
                }
                Op::ConcatCols(xs) => {
                    let xs = xs.clone();
                    let (m, total) = self.nodes[idx].value.dims2()?;
                    let mut col = 0;
                    for x in xs {
                        let (_, ni) = self.nodes[x.0].value.dims2()?;
                        if self.nodes[x.0].requires_grad {
                            let mut dx = vec![0.0; m * ni];
                            for i in 0..m {
                                dx[i * ni..(i + 1) * ni]
                                    .copy_from_slice(&gy[i * total + col..i * total + col + ni]);
                            }
                            self.accumulate(x, &dx);
                        }
                        col += ni;
                    }
                }
                Op::ConcatRows(xs) => {
                    let xs = xs.clone();
                    let mut row = 0;
                    for x in xs {
                        let (mi, ni) = self.nodes[x.0].value.dims2()?;
                        if self.nodes[x.0].requires_grad {
                            let dx = gy[row * ni..(row + mi) * ni].to_vec();
                            self.accumulate(x, &dx);
                        }
                        row += mi;
                    }
                }
                Op::SliceRows(x, start, _end) => {
                    let (x, start) = (*x, *start);
                    let (_, n) = self.nodes[x.0].value.dims2()?;
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    dx[start * n..start * n + gy.len()].copy_from_slice(&gy);
                    self.accumulate(x, &dx);
                }
                Op::BroadcastRows(x, m) => {
                    let (x, m) = (*x, *m);
                    let n = self.nodes[x.0].value.numel();
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[j] += gy[i * n + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let (m, n) = self.nodes[idx].value.dims2()?;
                    let y = self.nodes[idx].value.data().to_vec();
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let dot: f64 = (0..n).map(|j| gy[i * n + j] * y[i * n + j]).sum();
                        for j in 0..n {
                            dx[i * n + j] = y[i * n + j] * (gy[i * n + j] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let (m, n) = self.nodes[x.0].value.dims2()?;
                    let g = self.nodes[gain.0].value.data().to_vec();
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += gy[i * n + j];
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                    if self.nodes[gain.0].requires_grad {
                        let mut dg = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                dg[j] += gy[i * n + j] * xhat[i * n + j];
                            }
                        }
                        self.accumulate(gain, &dg);
                    }
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            let mut mean_dxhat = 0.0;
                            let mut mean_dxhat_xhat = 0.0;
                            for j in 0..n {
                                let dxh = gy[i * n + j] * g[j];
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * xhat[i * n + j];
                            }
                            mean_dxhat /= n as f64;
                            mean_dxhat_xhat /= n as f64;
                            for j in 0..n {
                                let dxh = gy[i * n + j] * g[j];
                                dx[i * n + j] = inv_std[i]
                                    * (dxh - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx: Vec<f64> = gy
                        .iter()
                        .zip(&y)
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let src = self.nodes[x.0].value.data().to_vec();
                    let dx: Vec<f64> = gy
                        .iter()
                        .zip(&src)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Exp(x) => {
                    let x = *x;
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx: Vec<f64> = gy.iter().zip(&y).map(|(&g, &e)| g * e).collect();
                    self.accumulate(x, &dx);
                }
                Op::Log(x) => {
                    let x = *x;
                    let src = self.nodes[x.0].value.data().to_vec();
                    let dx: Vec<f64> = gy.iter().zip(&src).map(|(&g, &v)| g / v).collect();
                    self.accumulate(x, &dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let src = self.nodes[x.0].value.data().to_vec();
                    let dx: Vec<f64> = gy
                        .iter()
                        .zip(&src)
                        .map(|(&g, &v)| if v > lo && v < hi { g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let dx = vec![gy[0]; self.nodes[x.0].value.numel()];
                    self.accumulate(x, &dx);
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let n = self.nodes[x.0].value.numel();
                    let dx = vec![gy[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let (m, n) = self.nodes[x.0].value.dims2()?;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gy[j] / m as f64;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Bce { pred, target, eps } => {
                    let (pred, target, eps) = (*pred, *target, *eps);
                    if self.nodes[pred.0].requires_grad {
                        let n = self.nodes[pred.0].value.numel() as f64;
                        let p = self.nodes[pred.0].value.data().to_vec();
                        let t = self.nodes[target.0].value.data().to_vec();
                        let dx: Vec<f64> = p
                            .iter()
                            .zip(&t)
                            .map(|(&p, &t)| {
                                if p <= eps || p >= 1.0 - eps {
                                    0.0
                                } else {
                                    gy[0] * (p - t) / (p * (1.0 - p)) / n
                                }
                            })
                            .collect();
                        self.accumulate(pred, &dx);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let grad = self.nodes[id.0]
            .grad
            .as_mut()
            .expect("grad buffers allocated at backward start");
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

fn matmul_plain(a: &[f64], m: usize, p: usize, b: &[f64], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        for l in 0..p {
            let av = a[i * p + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..q {
                out[i * q + j] += av * b[l * q + j];
            }
        }
    }
    out
}

/// a^T . b where a is [m x p] and b is [m x q]; result [p x q].
fn matmul_at_b(a: &[f64], m: usize, p: usize, b: &[f64], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..m {
        for l in 0..p {
            let av = a[i * p + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..q {
                out[l * q + j] += av * b[i * q + j];
            }
        }
    }
    out
}

/// a . b^T where a is [m x q] and b is [p x q]; result [m x p].
fn matmul_a_bt(a: &[f64], m: usize, q: usize, b: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for l in 0..p {
            let mut acc = 0.0;
            for j in 0..q {
                acc += a[i * q + j] * b[l * q + j];
            }
            out[i * p + l] = acc;
        }
    }
    out
}
