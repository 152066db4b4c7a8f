//! Reverse-mode differentiation: a tape of recorded ops over [`Tensor`]s.
//!
//! A tape is confined to one thread and lives for one forward/backward pass.
//! Leaves are inserted with [`Tape::leaf`]; every other node is produced by a
//! forward method that runs the raw kernel from [`crate::ops`] and records
//! how to push gradients back. [`Tape::backward`] walks the nodes in reverse,
//! skipping anything that no gradient-requiring leaf feeds into.

use crate::error::{CoreError, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// A named parameter: value plus a gradient accumulator of identical shape.
/// The accumulator is zeroed by the optimizer between steps.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::zero();
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Reshape(ValueId),
    Conv2d { x: ValueId, w: ValueId, stride: usize, pad: usize },
    Conv2dTranspose { x: ValueId, w: ValueId, stride: usize, pad: usize },
    ChannelBias { x: ValueId, b: ValueId },
    SoftmaxRows(ValueId),
    L2NormalizeRows { x: ValueId, eps: T },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Affine { x: ValueId, mul_c: T },
    Relu(ValueId),
    LeakyRelu { x: ValueId, alpha: T },
    Sigmoid(ValueId),
    Tanh(ValueId),
    Abs(ValueId),
    LogClamped { x: ValueId, eps: T },
    RecipClamped { x: ValueId, eps: T },
    Sum { x: ValueId, axes: Vec<usize> },
    Mean { x: ValueId, axes: Vec<usize> },
    Concat { xs: Vec<ValueId>, axis: usize },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<ValueId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } | Op::Conv2dTranspose { x, w, .. } => vec![*x, *w],
            Op::ChannelBias { x, b } => vec![*x, *b],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SoftmaxRows(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Abs(x) => vec![*x],
            Op::L2NormalizeRows { x, .. }
            | Op::Affine { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::LogClamped { x, .. }
            | Op::RecipClamped { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`, if it was reached by the backward pass.
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape if it was never touched
    /// (a leaf the loss does not depend on has zero gradient).
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor<T> {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> ValueId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Insert a copy of an existing value as a fresh gradient-stopped leaf.
    pub fn detach(&mut self, id: ValueId) -> ValueId {
        let v = self.value(id).clone();
        self.leaf(v, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> ValueId {
        let needs = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(value, op, needs)
    }

    // -- forward methods ----------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let v = ops::transpose(self.value(x))?;
        Ok(self.push_op(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push_op(v, Op::Reshape(x)))
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        let v = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push_op(v, Op::Conv2d { x, w, stride, pad }))
    }

    pub fn conv2d_transpose(&mut self, x: ValueId, w: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        let v = ops::conv2d_transpose(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push_op(v, Op::Conv2dTranspose { x, w, stride, pad }))
    }

    pub fn channel_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::channel_bias(self.value(x), self.value(b))?;
        Ok(self.push_op(v, Op::ChannelBias { x, b }))
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let v = ops::softmax_rows(self.value(x))?;
        Ok(self.push_op(v, Op::SoftmaxRows(x)))
    }

    pub fn l2_normalize_rows(&mut self, x: ValueId, eps: T) -> Result<ValueId> {
        let v = ops::l2_normalize_rows(self.value(x), eps)?;
        Ok(self.push_op(v, Op::L2NormalizeRows { x, eps }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: ValueId, c: T) -> ValueId {
        self.affine(x, c, T::zero())
    }

    pub fn affine(&mut self, x: ValueId, mul_c: T, add_c: T) -> ValueId {
        let v = ops::affine(self.value(x), mul_c, add_c);
        self.push_op(v, Op::Affine { x, mul_c })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = ops::relu(self.value(x));
        self.push_op(v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: ValueId, alpha: T) -> ValueId {
        let v = ops::leaky_relu(self.value(x), alpha);
        self.push_op(v, Op::LeakyRelu { x, alpha })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = ops::sigmoid(self.value(x));
        self.push_op(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let v = ops::tanh(self.value(x));
        self.push_op(v, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let v = ops::abs(self.value(x));
        self.push_op(v, Op::Abs(x))
    }

    pub fn log_clamped(&mut self, x: ValueId, eps: T) -> ValueId {
        let v = ops::log_clamped(self.value(x), eps);
        self.push_op(v, Op::LogClamped { x, eps })
    }

    pub fn recip_clamped(&mut self, x: ValueId, eps: T) -> ValueId {
        let v = ops::recip_clamped(self.value(x), eps);
        self.push_op(v, Op::RecipClamped { x, eps })
    }

    pub fn reduce_sum(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let v = ops::reduce_sum(self.value(x), axes)?;
        Ok(self.push_op(v, Op::Sum { x, axes: axes.to_vec() }))
    }

    pub fn reduce_mean(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let v = ops::reduce_mean(self.value(x), axes)?;
        Ok(self.push_op(v, Op::Mean { x, axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[ValueId], axis: usize) -> Result<ValueId> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|id| self.value(*id)).collect();
        let v = ops::concat(&tensors, axis)?;
        Ok(self.push_op(v, Op::Concat { xs: xs.to_vec(), axis }))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse-mode accumulation from a scalar loss. Returns one gradient per
    /// reached node; leaves that do not require gradients are skipped.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: ValueId, delta: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => {
                let summed = ops::add(existing, &delta)?;
                *existing = summed;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                if self.nodes[a.0].needs_grad {
                    let da = ops::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.nodes[b.0].needs_grad {
                    let db = ops::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, ops::transpose(g)?)?;
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshaped(self.value(*x).shape())?)?;
            }
            Op::Conv2d { x, w, stride, pad } => {
                if self.nodes[x.0].needs_grad {
                    let dx = ops::conv2d_transpose(g, self.value(*w), *stride, *pad)?;
                    self.accumulate(grads, *x, dx)?;
                }
                if self.nodes[w.0].needs_grad {
                    let k = self.value(*w).shape()[2];
                    let dw = ops::conv2d_weight_grad(g, self.value(*x), k, *stride, *pad)?;
                    self.accumulate(grads, *w, dw)?;
                }
            }
            Op::Conv2dTranspose { x, w, stride, pad } => {
                if self.nodes[x.0].needs_grad {
                    let dx = ops::conv2d(g, self.value(*w), *stride, *pad)?;
                    self.accumulate(grads, *x, dx)?;
                }
                if self.nodes[w.0].needs_grad {
                    let k = self.value(*w).shape()[2];
                    let dw = ops::conv2d_weight_grad(self.value(*x), g, k, *stride, *pad)?;
                    self.accumulate(grads, *w, dw)?;
                }
            }
            Op::ChannelBias { x, b } => {
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, g.clone())?;
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, ops::channel_sums(g))?;
                }
            }
            Op::SoftmaxRows(x) => {
                // dx_ij = s_ij · (g_ij − Σ_k g_ik s_ik)
                let s = &node.value;
                let m = s.shape()[1];
                let mut dx = Tensor::zeros(s.shape());
                {
                    let (sd, gd, dd) = (s.data(), g.data(), dx.data_mut());
                    for r in 0..s.shape()[0] {
                        let srow = &sd[r * m..(r + 1) * m];
                        let grow = &gd[r * m..(r + 1) * m];
                        let dot: T = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..m {
                            dd[r * m + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::L2NormalizeRows { x, eps } => {
                // For ‖x‖ ≥ eps: dx = (g − (g·y)y)/‖x‖; below eps the norm is
                // the constant eps, so dx = g/eps.
                let xv = self.value(*x);
                let y = &node.value;
                let m = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let (xd, yd, gd, dd) = (xv.data(), y.data(), g.data(), dx.data_mut());
                    for r in 0..xv.shape()[0] {
                        let xrow = &xd[r * m..(r + 1) * m];
                        let yrow = &yd[r * m..(r + 1) * m];
                        let grow = &gd[r * m..(r + 1) * m];
                        let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if norm >= *eps {
                            let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                            for j in 0..m {
                                dd[r * m + j] = (grow[j] - dot * yrow[j]) / norm;
                            }
                        } else {
                            for j in 0..m {
                                dd[r * m + j] = grow[j] / *eps;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, ops::scale(g, -T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, ops::mul(g, self.value(*b))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, ops::mul(g, self.value(*a))?)?;
                }
            }
            Op::Affine { x, mul_c } => {
                self.accumulate(grads, *x, ops::scale(g, *mul_c))?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = g.zip(xv, |gv, v| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, dx)?;
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.value(*x);
                let a = *alpha;
                let dx = g.zip(xv, |gv, v| if v > T::zero() { gv } else { gv * a });
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = g.zip(&node.value, |gv, s| gv * s * (T::one() - s));
                self.accumulate(grads, *x, dx)?;
            }
            Op::Tanh(x) => {
                let dx = g.zip(&node.value, |gv, t| gv * (T::one() - t * t));
                self.accumulate(grads, *x, dx)?;
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let dx = g.zip(xv, |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, dx)?;
            }
            Op::LogClamped { x, eps } => {
                let xv = self.value(*x);
                let (lo, hi) = (*eps, T::one() - *eps);
                let dx = g.zip(xv, |gv, v| if v > lo && v < hi { gv / v } else { T::zero() });
                self.accumulate(grads, *x, dx)?;
            }
            Op::RecipClamped { x, eps } => {
                let xv = self.value(*x);
                let lo = *eps;
                let dx = g.zip(xv, |gv, v| if v > lo { -gv / (v * v) } else { T::zero() });
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sum { x, axes } => {
                let dx = ops::broadcast_reduced(g, self.value(*x).shape(), axes);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Mean { x, axes } => {
                let shape = self.value(*x).shape();
                let all: Vec<usize> = (0..shape.len()).collect();
                let eff = if axes.is_empty() { &all[..] } else { &axes[..] };
                let count: usize = eff.iter().map(|&a| shape[a]).product();
                let dx = ops::broadcast_reduced(g, shape, axes);
                let dx = ops::scale(&dx, T::one() / T::from_usize(count).unwrap());
                self.accumulate(grads, *x, dx)?;
            }
            Op::Concat { xs, axis } => {
                let extents: Vec<usize> = xs.iter().map(|id| self.value(*id).shape()[*axis]).collect();
                let parts = ops::split(g, *axis, &extents)?;
                for (id, part) in xs.iter().zip(parts) {
                    self.accumulate(grads, *id, part)?;
                }
            }
        }
        Ok(())
    }
}

/// Result of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// `build` maps (tape, leaf for x) to the loss node. The analytic gradient
/// comes from [`Tape::backward`]; the numeric one is
/// `(f(x+h·e_i) − f(x−h·e_i)) / 2h`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(build: F, x: &Tensor<T>, h: T) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, ValueId) -> Result<ValueId>,
{
    finite_diff_check_with_ladder(build, x, h, &[])
}

/// [`finite_diff_check`] with a step-size ladder for deep compositions.
///
/// A single step cannot serve every coordinate of a deep graph: the central
/// difference error has a 1/h roundoff term (dominant where the gradient is
/// near zero, where the floored denominator turns evaluation noise into a
/// hard error floor) and an h² curvature term that spikes when the probe
/// window straddles a relu kink; shrinking the step moves the window off
/// the kink, enlarging it drowns out the roundoff. A coordinate therefore
/// passes if any step in the ladder around `h` brings it under `tol`; the
/// reported error per coordinate is the best one seen. A wrong backward is
/// off by an h-independent amount and still fails at every step.
pub fn finite_diff_check_ladder<T, F>(build: F, x: &Tensor<T>, h: T, tol: f64) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, ValueId) -> Result<ValueId>,
{
    let factors = [4.0, 16.0, 64.0, 0.25, 1.0 / 16.0];
    let ladder: Vec<(T, f64)> = factors.iter().map(|&f| (h * T::from_f64_lossy(f), tol)).collect();
    finite_diff_check_with_ladder(build, x, h, &ladder)
}

fn finite_diff_check_with_ladder<T, F>(
    build: F,
    x: &Tensor<T>,
    h: T,
    ladder: &[(T, f64)],
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, ValueId) -> Result<ValueId>,
{
    if h <= T::zero() {
        return Err(CoreError::Usage("finite_diff_check: h must be positive".into()));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, xid)?;
    if !tape.value(loss).all_finite() {
        return Err(CoreError::NonFinite { op: "finite_diff_check" });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xid, x.shape());

    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(probe.clone(), false);
        let l = build(&mut t, id)?;
        let v = t.value(l).item()?;
        if !v.is_finite() {
            return Err(CoreError::NonFinite { op: "finite_diff_check" });
        }
        Ok(v.to_f64_lossy())
    };

    let mut report = FdReport { max_rel_err: 0.0, worst_coord: 0, analytic_at_worst: 0.0, numeric_at_worst: 0.0 };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let a = analytic.data()[i].to_f64_lossy();
        let mut probe_at = |step: T| -> Result<f64> {
            probe.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * step.to_f64_lossy()))
        };
        let mut numeric = probe_at(h)?;
        let mut err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        for &(step, tol) in ladder {
            if err < tol {
                break;
            }
            let retry = probe_at(step)?;
            let retry_err = (a - retry).abs() / a.abs().max(retry.abs()).max(1e-8);
            if retry_err < err {
                err = retry_err;
                numeric = retry;
            }
        }
        if err > report.max_rel_err {
            report = FdReport { max_rel_err: err, worst_coord: i, analytic_at_worst: a, numeric_at_worst: numeric };
        }
    }
    Ok(report)
}
