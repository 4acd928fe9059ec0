//! Minimal tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! The operator set is exactly what the unrolled pursuit networks need:
//! dense and convolutional operators in both directions, parameter-free
//! shortcuts, elementwise arithmetic, per-channel non-negative
//! thresholding, pooling, and the losses. Nodes are appended in evaluation
//! order, so every input id is smaller than the id of the node reading it
//! and the tape is acyclic by construction.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, ShortcutMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `x * factor / s` with scalar node `s`.
    DivScalar { x: NodeId, s: NodeId, factor: f64 },
    MatVec { b: NodeId, w: NodeId },
    MatTVec { b: NodeId, u: NodeId },
    Conv { k: NodeId, x: NodeId, geom: ConvGeometry },
    ConvT { k: NodeId, y: NodeId, geom: ConvGeometry },
    Shortcut { x: NodeId, map: ShortcutMap },
    ShortcutT { y: NodeId, map: ShortcutMap },
    Reshape(NodeId),
    ScaleAxis { x: NodeId, s: NodeId, axis: usize },
    Threshold { x: NodeId, lambda: NodeId },
    Gap(NodeId),
    HalfSqNorm(NodeId),
    Sum(NodeId),
    CrossEntropy { logits: NodeId, label: usize, softmax: Vec<f64> },
}

impl Op {
    fn tag(&self) -> u8 {
        match self {
            Op::Leaf => 0,
            Op::Add(..) => tags::ADD,
            Op::Sub(..) => tags::SUB,
            Op::Mul(..) => tags::MUL,
            Op::Scale(..) => tags::SCALE,
            Op::DivScalar { .. } => tags::DIV_SCALAR,
            Op::MatVec { .. } => tags::MATVEC,
            Op::MatTVec { .. } => tags::MATTVEC,
            Op::Conv { .. } => tags::CONV,
            Op::ConvT { .. } => tags::CONVT,
            Op::Shortcut { .. } => tags::SHORTCUT,
            Op::ShortcutT { .. } => tags::SHORTCUTT,
            Op::Reshape(..) => tags::RESHAPE,
            Op::ScaleAxis { .. } => tags::SCALE_AXIS,
            Op::Threshold { .. } => tags::THRESHOLD,
            Op::Gap(..) => tags::GAP,
            Op::HalfSqNorm(..) => tags::HALF_SQ_NORM,
            Op::Sum(..) => tags::SUM,
            Op::CrossEntropy { .. } => tags::CROSS_ENTROPY,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Reshape(a) | Op::Gap(a) | Op::HalfSqNorm(a) | Op::Sum(a) => vec![a],
            Op::DivScalar { x, s, .. } => vec![x, s],
            Op::MatVec { b, w } => vec![b, w],
            Op::MatTVec { b, u } => vec![b, u],
            Op::Conv { k, x, .. } => vec![k, x],
            Op::ConvT { k, y, .. } => vec![k, y],
            Op::Shortcut { x, .. } => vec![x],
            Op::ShortcutT { y, .. } => vec![y],
            Op::ScaleAxis { x, s, .. } => vec![x, s],
            Op::Threshold { x, lambda } => vec![x, lambda],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

/// Running FNV-1a hash over the op sequence and output shapes. Two
/// computations that apply the same operators to the same shapes in the
/// same order share a fingerprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint(0xcbf2_9ce4_8422_2325)
    }
}

impl Fingerprint {
    pub(crate) fn mix(&mut self, tag: u8, shape: &[usize]) {
        let mut h = self.0;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        feed(tag);
        for &d in shape {
            for b in (d as u64).to_le_bytes() {
                feed(b);
            }
        }
        feed(0xff);
        self.0 = h;
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

/// Op tags shared with the eager evaluator so both produce identical
/// fingerprints for the same computation.
pub(crate) mod tags {
    pub const ADD: u8 = 1;
    pub const SUB: u8 = 2;
    pub const MUL: u8 = 3;
    pub const SCALE: u8 = 4;
    pub const DIV_SCALAR: u8 = 5;
    pub const MATVEC: u8 = 6;
    pub const MATTVEC: u8 = 7;
    pub const CONV: u8 = 8;
    pub const CONVT: u8 = 9;
    pub const SHORTCUT: u8 = 10;
    pub const SHORTCUTT: u8 = 11;
    pub const RESHAPE: u8 = 12;
    pub const SCALE_AXIS: u8 = 13;
    pub const THRESHOLD: u8 = 14;
    pub const GAP: u8 = 15;
    pub const HALF_SQ_NORM: u8 = 16;
    pub const SUM: u8 = 17;
    pub const CROSS_ENTROPY: u8 = 18;
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread; independent graphs can
/// be built concurrently over shared read-only parameters.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fingerprint: Fingerprint,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of `shape` when the root does not depend
    /// on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// A differentiable input (parameter or attacked signal).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.fingerprint.mix(op.tag(), value.shape());
        self.push_raw(op, value, requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("node {} is not in this graph", id.0)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).scale(c);
        Ok(self.push(Op::Scale(a, c), v))
    }

    /// `x * factor / s` where `s` holds a single value.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId, factor: f64) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape(format!("div_scalar: divisor has shape {:?}", sv.shape())));
        }
        let c = factor / sv.data()[0];
        let v = self.value(x).scale(c);
        Ok(self.push(Op::DivScalar { x, s, factor }, v))
    }

    /// `B·w`
    pub fn matvec(&mut self, b: NodeId, w: NodeId) -> Result<NodeId> {
        let v = tensor::linear_map(self.value(b), self.value(w))?;
        Ok(self.push(Op::MatVec { b, w }, v))
    }

    /// `Bᵀ·u`
    pub fn matvec_t(&mut self, b: NodeId, u: NodeId) -> Result<NodeId> {
        let v = tensor::adjoint_map(self.value(b), self.value(u))?;
        Ok(self.push(Op::MatTVec { b, u }, v))
    }

    pub fn conv(&mut self, k: NodeId, x: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = geom.forward(self.value(k), self.value(x))?;
        Ok(self.push(Op::Conv { k, x, geom }, v))
    }

    pub fn conv_transpose(&mut self, k: NodeId, y: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = geom.transpose(self.value(k), self.value(y))?;
        Ok(self.push(Op::ConvT { k, y, geom }, v))
    }

    pub fn shortcut(&mut self, x: NodeId, map: ShortcutMap) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != map.source.iter().product::<usize>() {
            return Err(Error::shape(format!("shortcut: input {:?} vs {:?}", xv.shape(), map.source)));
        }
        let v = Tensor::from_parts(map.target.to_vec(), map.apply(xv.data()));
        Ok(self.push(Op::Shortcut { x, map }, v))
    }

    pub fn shortcut_t(&mut self, y: NodeId, map: ShortcutMap) -> Result<NodeId> {
        let yv = self.value(y);
        if yv.len() != map.target.iter().product::<usize>() {
            return Err(Error::shape(format!("shortcut_t: input {:?} vs {:?}", yv.shape(), map.target)));
        }
        let v = Tensor::from_parts(map.source.to_vec(), map.adjoint(yv.data()));
        Ok(self.push(Op::ShortcutT { y, map }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Multiplies every slice along `axis` of `x` by the matching entry of
    /// `s` (one entry per index of that axis).
    pub fn scale_axis(&mut self, x: NodeId, s: NodeId, axis: usize) -> Result<NodeId> {
        let v = scale_axis_value(self.value(x), self.value(s), axis)?;
        Ok(self.push(Op::ScaleAxis { x, s, axis }, v))
    }

    /// Non-negative soft threshold `max(x − λ_c, 0)` with one threshold per
    /// channel (leading axis) of `x`.
    pub fn threshold(&mut self, x: NodeId, lambda: NodeId) -> Result<NodeId> {
        let v = threshold_value(self.value(x), self.value(lambda))?;
        Ok(self.push(Op::Threshold { x, lambda }, v))
    }

    pub fn global_average_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::global_average_pool(self.value(x))?;
        Ok(self.push(Op::Gap(x), v))
    }

    /// `½‖x‖²`
    pub fn half_sq_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let n = self.value(x).norm();
        Ok(self.push(Op::HalfSqNorm(x), Tensor::scalar(0.5 * n * n)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).sum();
        Ok(self.push(Op::Sum(x), Tensor::scalar(s)))
    }

    /// Softmax cross-entropy of `logits` against `label`.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (loss, softmax) = cross_entropy_value(self.value(logits).data(), label)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Activation pattern (`x − λ > 0`) of every threshold node in order.
    pub fn threshold_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Threshold { .. } = node.op {
                out.extend(node.value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from a scalar root. Accumulation order is fixed by the
    /// node order, so repeated sweeps are bit-identical.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Cycle(idx));
                }
            }
            for (input, contrib) in self.local_grads(&node.op, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let gd = g.data();
        let out = match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.mul(self.value(*b))?),
                (*b, g.mul(self.value(*a))?),
            ],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::DivScalar { x, s, factor } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x);
                let ds = -factor / (sv * sv) * tensor::dot(gd, xv.data());
                vec![(*x, g.scale(factor / sv)), (*s, Tensor::scalar(ds))]
            }
            Op::MatVec { b, w } => {
                let bv = self.value(*b);
                let wv = self.value(*w);
                let (rows, cols) = bv.matrix_dims("matvec backward")?;
                let k = wv.len() / cols;
                let db = tensor::matmul_nt(gd, wv.data(), rows, k, cols);
                let dw = tensor::matmul_tn(bv.data(), gd, rows, cols, k);
                vec![
                    (*b, Tensor::from_parts(bv.shape().to_vec(), db)),
                    (*w, Tensor::from_parts(wv.shape().to_vec(), dw)),
                ]
            }
            Op::MatTVec { b, u } => {
                let bv = self.value(*b);
                let uv = self.value(*u);
                let (rows, cols) = bv.matrix_dims("matvec_t backward")?;
                let k = uv.len() / rows;
                // out = Bᵀu  =>  dB = u·gᵀ, du = B·g
                let db = tensor::matmul_nt(uv.data(), gd, rows, k, cols);
                let du = tensor::matmul(bv.data(), gd, rows, cols, k);
                vec![
                    (*b, Tensor::from_parts(bv.shape().to_vec(), db)),
                    (*u, Tensor::from_parts(uv.shape().to_vec(), du)),
                ]
            }
            Op::Conv { k, x, geom } => {
                let kv = self.value(*k);
                let xv = self.value(*x);
                let dk = geom.kernel_grad_forward(gd, xv.data());
                let dx = geom.transpose(kv, g)?;
                vec![
                    (*k, Tensor::from_parts(kv.shape().to_vec(), dk)),
                    (*x, dx.reshape(xv.shape())?),
                ]
            }
            Op::ConvT { k, y, geom } => {
                let kv = self.value(*k);
                let yv = self.value(*y);
                let dk = geom.kernel_grad_transpose(gd, yv.data());
                let dy = geom.forward(kv, g)?;
                vec![
                    (*k, Tensor::from_parts(kv.shape().to_vec(), dk)),
                    (*y, dy.reshape(yv.shape())?),
                ]
            }
            Op::Shortcut { x, map } => {
                let xv = self.value(*x);
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), map.adjoint(gd)))]
            }
            Op::ShortcutT { y, map } => {
                let yv = self.value(*y);
                vec![(*y, Tensor::from_parts(yv.shape().to_vec(), map.apply(gd)))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.value(*x).shape())?)],
            Op::ScaleAxis { x, s, axis } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let dx = scale_axis_value(g, sv, *axis)?;
                let (outer, n, inner) = axis_split(xv.shape(), *axis);
                let mut ds = vec![0.0; n];
                for o in 0..outer {
                    for (i, d) in ds.iter_mut().enumerate() {
                        let base = (o * n + i) * inner;
                        *d += tensor::dot(&gd[base..base + inner], &xv.data()[base..base + inner]);
                    }
                }
                vec![(*x, dx), (*s, Tensor::from_parts(sv.shape().to_vec(), ds))]
            }
            Op::Threshold { x, lambda } => {
                // Derivative is 0 on the closed dead zone (output exactly 0).
                let xv = self.value(*x);
                let lv = self.value(*lambda);
                let c = lv.len();
                let spatial = xv.len() / c;
                let mut dx = vec![0.0; xv.len()];
                let mut dl = vec![0.0; c];
                for ch in 0..c {
                    let l = lv.data()[ch];
                    for i in ch * spatial..(ch + 1) * spatial {
                        if xv.data()[i] - l > 0.0 {
                            dx[i] = gd[i];
                            dl[ch] -= gd[i];
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), dx)),
                    (*lambda, Tensor::from_parts(lv.shape().to_vec(), dl)),
                ]
            }
            Op::Gap(x) => {
                let xv = self.value(*x);
                let c = xv.channels();
                let spatial = xv.len() / c;
                let dx = (0..xv.len()).map(|i| gd[i / spatial] / spatial as f64).collect();
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Op::HalfSqNorm(x) => vec![(*x, self.value(*x).scale(gd[0]))],
            Op::Sum(x) => {
                let xv = self.value(*x);
                vec![(*x, Tensor::full(xv.shape(), gd[0]))]
            }
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let lv = self.value(*logits);
                let d = softmax
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| gd[0] * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                vec![(*logits, Tensor::from_parts(lv.shape().to_vec(), d))]
            }
        };
        Ok(out)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

pub(crate) fn scale_axis_value(x: &Tensor, s: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() || x.shape()[axis] != s.len() {
        return Err(Error::shape(format!(
            "scale_axis: {:?} along axis {axis} vs scale {:?}",
            x.shape(),
            s.shape()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut data = x.data().to_vec();
    for o in 0..outer {
        for i in 0..n {
            let base = (o * n + i) * inner;
            let f = s.data()[i];
            for v in &mut data[base..base + inner] {
                *v *= f;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn threshold_value(x: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    let c = lambda.len();
    if c == 0 || (c != 1 && x.channels() != c) {
        return Err(Error::shape(format!(
            "threshold: input {:?} has {} channels but {} thresholds were given",
            x.shape(),
            x.channels(),
            c
        )));
    }
    let spatial = x.len() / c;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - lambda.data()[i / spatial]).max(0.0))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn cross_entropy_value(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    Ok((loss, exps.into_iter().map(|e| e / total).collect()))
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − central difference| / max(1, |analytic|)` over the
    /// coordinates that were checked.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes changed a threshold activation pattern.
    pub skipped: Vec<usize>,
}

/// Compares the tape gradient of the scalar graph built by `f` at `theta`
/// against central differences with step `h`. A coordinate is skipped (and
/// reported) when either probe flips the activation pattern of any
/// threshold, because the function is not differentiable across the kink.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |t: Tensor| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let leaf = g.leaf(t);
        let root = f(&mut g, leaf)?;
        Ok((g.value(root).data()[0], g.threshold_pattern()))
    };

    let mut g = Graph::new();
    let leaf = g.leaf(theta.clone());
    let root = f(&mut g, leaf)?;
    let analytic = g.backward(root)?.get_or_zeros(leaf, theta.shape());
    let base_pattern = g.threshold_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let (fp, pp) = eval(plus)?;
        let (fm, pm) = eval(minus)?;
        if pp != base_pattern || pm != base_pattern {
            report.skipped.push(i);
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
