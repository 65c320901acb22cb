//! Reverse-mode automatic differentiation on a Wengert tape. A tape is
//! built per step (define-by-run), records every differentiable op in
//! execution order, and replays them in reverse to accumulate gradients.
//! Replay order and every kernel are fixed, so two backward passes over
//! identical tapes produce bitwise-identical gradients.
//!
//! A tape in inference mode computes values through the same code paths but
//! records nothing; the momentum teacher and all feature extraction run that
//! way, which is what guarantees they can never receive gradient.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value on a tape. Only meaningful for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
}

enum Op {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    MatmulNt { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    AddRow { a: TensorId, row: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, c: f64, out: TensorId },
    Softmax { x: TensorId, out: TensorId, temp: f64 },
    LogSoftmax { x: TensorId, out: TensorId, temp: f64 },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, out: TensorId, eps: f64 },
    Gelu { x: TensorId, out: TensorId },
    L2Normalize { x: TensorId, out: TensorId, eps: f64 },
    NarrowCols { a: TensorId, out: TensorId, start: usize },
    NarrowRows { a: TensorId, out: TensorId, start: usize },
    ConcatCols { inputs: Vec<TensorId>, out: TensorId },
    ConcatRows { inputs: Vec<TensorId>, out: TensorId },
    SumAll { a: TensorId, out: TensorId },
    AddN { inputs: Vec<TensorId>, out: TensorId },
}

impl Op {
    fn out(&self) -> TensorId {
        match self {
            Op::Matmul { out, .. }
            | Op::MatmulNt { out, .. }
            | Op::Add { out, .. }
            | Op::AddRow { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Softmax { out, .. }
            | Op::LogSoftmax { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::L2Normalize { out, .. }
            | Op::NarrowCols { out, .. }
            | Op::NarrowRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::SumAll { out, .. }
            | Op::AddN { out, .. } => *out,
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor<T>>>,
    recording: bool,
}

impl<T: Scalar> Tape<T> {
    /// A tape that records ops for a later `backward`.
    pub fn recording() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only computes values; nothing is recorded and `backward`
    /// is a contract error. Teacher and evaluation forwards run on these.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.recording,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, true)
    }

    /// A non-differentiable input (data, detached targets, fixed matrices).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, false)
    }

    /// New node sharing `id`'s value but cut off from its history; gradient
    /// never flows through a detached node.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let v = self.nodes[id.0].value.clone();
        self.push(v, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. `id`. `None` until
    /// `backward` ran, and always `None` for non-differentiable nodes.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[TensorId],
        make: impl FnOnce(TensorId) -> Op,
    ) -> TensorId {
        let needs = self.recording && self.any_grad(inputs);
        let out = self.push(value, needs);
        if needs {
            let op = make(out);
            self.ops.push(op);
        }
        out
    }

    // ---- differentiable ops ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], |out| Op::Matmul { a, b, out }))
    }

    /// `a @ bᵀ`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], |out| Op::MatmulNt { a, b, out }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], |out| Op::Add { a, b, out }))
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let v = ops::add_row(self.value(a), self.value(row))?;
        Ok(self.record(v, &[a, row], |out| Op::AddRow { a, row, out }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], |out| Op::Mul { a, b, out }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = ops::scale(self.value(a), T::from_f64(c));
        self.record(v, &[a], |out| Op::Scale { a, c, out })
    }

    pub fn softmax(&mut self, x: TensorId, temp: f64) -> Result<TensorId> {
        let v = ops::softmax_rows(self.value(x), T::from_f64(temp))?;
        Ok(self.record(v, &[x], |out| Op::Softmax { x, out, temp }))
    }

    pub fn log_softmax(&mut self, x: TensorId, temp: f64) -> Result<TensorId> {
        let v = ops::log_softmax_rows(self.value(x), T::from_f64(temp))?;
        Ok(self.record(v, &[x], |out| Op::LogSoftmax { x, out, temp }))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let v = ops::layer_norm_rows(
            self.value(x),
            self.value(gain),
            self.value(bias),
            T::from_f64(eps),
        )?;
        Ok(self.record(v, &[x, gain, bias], |out| Op::LayerNorm {
            x,
            gain,
            bias,
            out,
            eps,
        }))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let v = ops::gelu(self.value(x));
        self.record(v, &[x], |out| Op::Gelu { x, out })
    }

    pub fn l2_normalize(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let v = ops::l2_normalize_rows(self.value(x), T::from_f64(eps))?;
        Ok(self.record(v, &[x], |out| Op::L2Normalize { x, out, eps }))
    }

    pub fn narrow_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let v = ops::narrow_cols(self.value(a), start, len)?;
        Ok(self.record(v, &[a], |out| Op::NarrowCols { a, out, start }))
    }

    pub fn narrow_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let v = ops::narrow_rows(self.value(a), start, len)?;
        Ok(self.record(v, &[a], |out| Op::NarrowRows { a, out, start }))
    }

    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let v = ops::concat_cols(&vals)?;
        let needs = self.recording && self.any_grad(inputs);
        let out = self.push(v, needs);
        if needs {
            self.ops.push(Op::ConcatCols {
                inputs: inputs.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let v = ops::concat_rows(&vals)?;
        let needs = self.recording && self.any_grad(inputs);
        let out = self.push(v, needs);
        if needs {
            self.ops.push(Op::ConcatRows {
                inputs: inputs.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = Tensor::scalar_value(ops::sum_all(self.value(a)));
        self.record(v, &[a], |out| Op::SumAll { a, out })
    }

    /// Elementwise sum of same-shaped tensors (the loss accumulator).
    pub fn add_n(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Param("add_n of zero tensors".into()));
        }
        let mut v = self.value(inputs[0]).clone();
        for id in &inputs[1..] {
            v = ops::add(&v, self.value(*id))?;
        }
        let needs = self.recording && self.any_grad(inputs);
        let out = self.push(v, needs);
        if needs {
            self.ops.push(Op::AddN {
                inputs: inputs.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward ----

    fn accumulate(&mut self, id: TensorId, delta: &Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                let gd = g.data_mut();
                for (gv, dv) in gd.iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1, walks the
    /// recorded ops last-to-first, and leaves gradients readable via `grad`.
    /// Every differentiable leaf gets a gradient (zero if the loss does not
    /// depend on it).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::ONE));
        }

        let ops_taken = std::mem::take(&mut self.ops);
        let mut result = Ok(());
        for op in ops_taken.iter().rev() {
            // Ops are only recorded when their output is on a grad path; an
            // output nothing contributed to yet has zero grad -> skip.
            let dy = match self.grads[op.out().0].clone() {
                Some(g) => g,
                None => continue,
            };
            result = self.backprop_one(op, &dy);
            if result.is_err() {
                break;
            }
        }
        self.ops = ops_taken;
        result?;

        // Leaves the loss never reached still deserve a (zero) gradient.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(self.nodes[i].value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn backprop_one(&mut self, op: &Op, dy: &Tensor<T>) -> Result<()> {
        match op {
            &Op::Matmul { a, b, .. } => {
                let da = ops::matmul_nt(dy, self.value(b))?;
                let db = ops::matmul_tn(self.value(a), dy)?;
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::MatmulNt { a, b, .. } => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let da = ops::matmul(dy, self.value(b))?;
                let db = ops::matmul_tn(dy, self.value(a))?;
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Add { a, b, .. } => {
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            &Op::AddRow { a, row, .. } => {
                self.accumulate(a, dy);
                let (m, n) = dy.dims2()?;
                let mut rsum = vec![T::ZERO; n];
                for i in 0..m {
                    for j in 0..n {
                        rsum[j] += dy.get2(i, j);
                    }
                }
                let rg = Tensor::from_vec(self.value(row).shape().to_vec(), rsum)?;
                self.accumulate(row, &rg);
            }
            &Op::Mul { a, b, .. } => {
                let da = ops::mul(dy, self.value(b))?;
                let db = ops::mul(dy, self.value(a))?;
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Scale { a, c, .. } => {
                let da = ops::scale(dy, T::from_f64(c));
                self.accumulate(a, &da);
            }
            &Op::Softmax { x, out, temp } => {
                // dX = (1/t) · y ⊙ (dy − <dy, y>) per row.
                let y = self.value(out);
                let (m, n) = y.dims2()?;
                let inv_t = T::from_f64(1.0 / temp);
                let mut dx = vec![T::ZERO; m * n];
                for i in 0..m {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let d = ops::dot(dr, yr);
                    let orow = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] = yr[j] * (dr[j] - d) * inv_t;
                    }
                }
                let dx = Tensor::from_vec(vec![m, n], dx)?;
                self.accumulate(x, &dx);
            }
            &Op::LogSoftmax { x, out, temp } => {
                // dX = (1/t) · (dy − p ⊙ Σ dy) per row, p = exp(out).
                let y = self.value(out);
                let (m, n) = y.dims2()?;
                let inv_t = T::from_f64(1.0 / temp);
                let mut dx = vec![T::ZERO; m * n];
                for i in 0..m {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let mut s = T::ZERO;
                    for &v in dr {
                        s += v;
                    }
                    let orow = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] = (dr[j] - yr[j].exp() * s) * inv_t;
                    }
                }
                let dx = Tensor::from_vec(vec![m, n], dx)?;
                self.accumulate(x, &dx);
            }
            &Op::LayerNorm { x, gain, bias, eps, .. } => {
                let xv = self.value(x).clone();
                let g = self.value(gain).clone();
                let (m, n) = xv.dims2()?;
                let inv_n = T::ONE / T::from_f64(n as f64);
                let mut dx = vec![T::ZERO; m * n];
                let mut dg = vec![T::ZERO; n];
                let mut db = vec![T::ZERO; n];
                for i in 0..m {
                    let row = xv.row(i);
                    let dr = dy.row(i);
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = T::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var = d.mul_add(d, var);
                    }
                    var = var * inv_n;
                    let inv = T::ONE / (var + T::from_f64(eps)).sqrt();
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dyg = dr[j] * g.data()[j];
                        m1 += dyg;
                        m2 += dyg * xh;
                        dg[j] += dr[j] * xh;
                        db[j] += dr[j];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    let orow = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dyg = dr[j] * g.data()[j];
                        orow[j] = (dyg - m1 - xh * m2) * inv;
                    }
                }
                let dxt = Tensor::from_vec(vec![m, n], dx)?;
                let dgt = Tensor::from_vec(self.value(gain).shape().to_vec(), dg)?;
                let dbt = Tensor::from_vec(self.value(bias).shape().to_vec(), db)?;
                self.accumulate(x, &dxt);
                self.accumulate(gain, &dgt);
                self.accumulate(bias, &dbt);
            }
            &Op::Gelu { x, .. } => {
                // d/dx [x Φ(x)] = Φ(x) + x φ(x)
                let xv = self.value(x);
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let deriv = xv.map(|v| {
                    let cdf = half * (T::ONE + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                    cdf + v * pdf
                });
                let dx = ops::mul(dy, &deriv)?;
                self.accumulate(x, &dx);
            }
            &Op::L2Normalize { x, out, eps } => {
                let xv = self.value(x);
                let y = self.value(out);
                let (m, n) = xv.dims2()?;
                let epst = T::from_f64(eps);
                let mut dx = vec![T::ZERO; m * n];
                for i in 0..m {
                    let row = xv.row(i);
                    let norm = ops::dot(row, row).sqrt();
                    let dr = dy.row(i);
                    let orow = &mut dx[i * n..(i + 1) * n];
                    if norm > epst {
                        let yr = y.row(i);
                        let d = ops::dot(dr, yr);
                        for j in 0..n {
                            orow[j] = (dr[j] - yr[j] * d) / norm;
                        }
                    } else {
                        // Below the clamp the map is linear: x / eps.
                        for j in 0..n {
                            orow[j] = dr[j] / epst;
                        }
                    }
                }
                let dx = Tensor::from_vec(vec![m, n], dx)?;
                self.accumulate(x, &dx);
            }
            &Op::NarrowCols { a, start, .. } => {
                let (m, n) = self.value(a).dims2()?;
                let (dm, dn) = dy.dims2()?;
                debug_assert_eq!(m, dm);
                let mut da = vec![T::ZERO; m * n];
                for i in 0..dm {
                    let dr = dy.row(i);
                    da[i * n + start..i * n + start + dn].copy_from_slice(dr);
                }
                let da = Tensor::from_vec(vec![m, n], da)?;
                self.accumulate(a, &da);
            }
            &Op::NarrowRows { a, start, .. } => {
                let (m, n) = self.value(a).dims2()?;
                let (dm, _) = dy.dims2()?;
                let mut da = vec![T::ZERO; m * n];
                da[start * n..(start + dm) * n].copy_from_slice(dy.data());
                let da = Tensor::from_vec(vec![m, n], da)?;
                self.accumulate(a, &da);
            }
            Op::ConcatCols { inputs, .. } => {
                let mut off = 0;
                for &id in inputs {
                    let w = self.value(id).dims2()?.1;
                    let part = ops::narrow_cols(dy, off, w)?;
                    self.accumulate(id, &part);
                    off += w;
                }
            }
            Op::ConcatRows { inputs, .. } => {
                let mut off = 0;
                for &id in inputs {
                    let h = self.value(id).dims2()?.0;
                    let part = ops::narrow_rows(dy, off, h)?;
                    self.accumulate(id, &part);
                    off += h;
                }
            }
            &Op::SumAll { a, .. } => {
                let s = dy.data()[0];
                let da = Tensor::full(self.value(a).shape().to_vec(), s);
                self.accumulate(a, &da);
            }
            Op::AddN { inputs, .. } => {
                for &id in inputs {
                    self.accumulate(id, dy);
                }
            }
        }
        Ok(())
    }
}
