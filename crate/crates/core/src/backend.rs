//! Evaluation backends for the pursuit algorithms.
//!
//! The algorithms are written once against [`Backend`]. [`Eager`] computes
//! plain values; [`Graph`] records a tape for differentiation. Both mix the
//! same op tags into a [`Fingerprint`], so an attack gradient and the
//! evaluation it targets can be checked to run the same computation.

use crate::autodiff::{self, tags, Fingerprint, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, ShortcutMap, Tensor};

pub trait Backend {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    /// Input that gradients should flow to (a no-op distinction for eager).
    fn leaf(&mut self, t: Tensor) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn fingerprint(&self) -> Fingerprint;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V>;
    fn div_scalar(&mut self, x: &Self::V, s: &Self::V, factor: f64) -> Result<Self::V>;
    fn matvec(&mut self, b: &Self::V, w: &Self::V) -> Result<Self::V>;
    fn matvec_t(&mut self, b: &Self::V, u: &Self::V) -> Result<Self::V>;
    fn conv(&mut self, k: &Self::V, x: &Self::V, geom: ConvGeometry) -> Result<Self::V>;
    fn conv_transpose(&mut self, k: &Self::V, y: &Self::V, geom: ConvGeometry) -> Result<Self::V>;
    fn shortcut(&mut self, x: &Self::V, map: ShortcutMap) -> Result<Self::V>;
    fn shortcut_t(&mut self, y: &Self::V, map: ShortcutMap) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn scale_axis(&mut self, x: &Self::V, s: &Self::V, axis: usize) -> Result<Self::V>;
    fn threshold(&mut self, x: &Self::V, lambda: &Self::V) -> Result<Self::V>;
    fn global_average_pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn half_sq_norm(&mut self, x: &Self::V) -> Result<Self::V>;
    fn cross_entropy(&mut self, logits: &Self::V, label: usize) -> Result<Self::V>;

    /// Reshape only when the shapes differ.
    fn conform(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        if self.value(x).shape() == shape {
            Ok(x.clone())
        } else {
            self.reshape(x, shape)
        }
    }
}

/// Direct evaluation without recording.
#[derive(Clone, Debug, Default)]
pub struct Eager {
    fingerprint: Fingerprint,
}

impl Eager {
    pub fn new() -> Self {
        Eager::default()
    }

    fn done(&mut self, tag: u8, t: Tensor) -> Result<Tensor> {
        self.fingerprint.mix(tag, t.shape());
        Ok(t)
    }
}

impl Backend for Eager {
    type V = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn leaf(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.add(b)?;
        self.done(tags::ADD, v)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.sub(b)?;
        self.done(tags::SUB, v)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let v = a.mul(b)?;
        self.done(tags::MUL, v)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.done(tags::SCALE, a.scale(c))
    }

    fn div_scalar(&mut self, x: &Tensor, s: &Tensor, factor: f64) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(Error::Shape(format!("div_scalar: divisor has shape {:?}", s.shape())));
        }
        self.done(tags::DIV_SCALAR, x.scale(factor / s.data()[0]))
    }

    fn matvec(&mut self, b: &Tensor, w: &Tensor) -> Result<Tensor> {
        let v = tensor::linear_map(b, w)?;
        self.done(tags::MATVEC, v)
    }

    fn matvec_t(&mut self, b: &Tensor, u: &Tensor) -> Result<Tensor> {
        let v = tensor::adjoint_map(b, u)?;
        self.done(tags::MATTVEC, v)
    }

    fn conv(&mut self, k: &Tensor, x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
        let v = geom.forward(k, x)?;
        self.done(tags::CONV, v)
    }

    fn conv_transpose(&mut self, k: &Tensor, y: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
        let v = geom.transpose(k, y)?;
        self.done(tags::CONVT, v)
    }

    fn shortcut(&mut self, x: &Tensor, map: ShortcutMap) -> Result<Tensor> {
        if x.len() != map.source.iter().product::<usize>() {
            return Err(Error::Shape(format!("shortcut: input {:?} vs {:?}", x.shape(), map.source)));
        }
        let v = Tensor::from_parts(map.target.to_vec(), map.apply(x.data()));
        self.done(tags::SHORTCUT, v)
    }

    fn shortcut_t(&mut self, y: &Tensor, map: ShortcutMap) -> Result<Tensor> {
        if y.len() != map.target.iter().product::<usize>() {
            return Err(Error::Shape(format!("shortcut_t: input {:?} vs {:?}", y.shape(), map.target)));
        }
        let v = Tensor::from_parts(map.source.to_vec(), map.adjoint(y.data()));
        self.done(tags::SHORTCUTT, v)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = x.reshape(shape)?;
        self.done(tags::RESHAPE, v)
    }

    fn scale_axis(&mut self, x: &Tensor, s: &Tensor, axis: usize) -> Result<Tensor> {
        let v = autodiff::scale_axis_value(x, s, axis)?;
        self.done(tags::SCALE_AXIS, v)
    }

    fn threshold(&mut self, x: &Tensor, lambda: &Tensor) -> Result<Tensor> {
        let v = autodiff::threshold_value(x, lambda)?;
        self.done(tags::THRESHOLD, v)
    }

    fn global_average_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        let v = tensor::global_average_pool(x)?;
        self.done(tags::GAP, v)
    }

    fn half_sq_norm(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.norm();
        self.done(tags::HALF_SQ_NORM, Tensor::scalar(0.5 * n * n))
    }

    fn cross_entropy(&mut self, logits: &Tensor, label: usize) -> Result<Tensor> {
        let (loss, _) = autodiff::cross_entropy_value(logits.data(), label)?;
        self.done(tags::CROSS_ENTROPY, Tensor::scalar(loss))
    }
}

impl Backend for Graph {
    type V = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        Graph::value(self, *v)
    }

    fn leaf(&mut self, t: Tensor) -> NodeId {
        Graph::leaf(self, t)
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        Graph::constant(self, t)
    }

    fn fingerprint(&self) -> Fingerprint {
        Graph::fingerprint(self)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::add(self, *a, *b)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::sub(self, *a, *b)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Graph::mul(self, *a, *b)
    }

    fn scale(&mut self, a: &NodeId, c: f64) -> Result<NodeId> {
        Graph::scale(self, *a, c)
    }

    fn div_scalar(&mut self, x: &NodeId, s: &NodeId, factor: f64) -> Result<NodeId> {
        Graph::div_scalar(self, *x, *s, factor)
    }

    fn matvec(&mut self, b: &NodeId, w: &NodeId) -> Result<NodeId> {
        Graph::matvec(self, *b, *w)
    }

    fn matvec_t(&mut self, b: &NodeId, u: &NodeId) -> Result<NodeId> {
        Graph::matvec_t(self, *b, *u)
    }

    fn conv(&mut self, k: &NodeId, x: &NodeId, geom: ConvGeometry) -> Result<NodeId> {
        Graph::conv(self, *k, *x, geom)
    }

    fn conv_transpose(&mut self, k: &NodeId, y: &NodeId, geom: ConvGeometry) -> Result<NodeId> {
        Graph::conv_transpose(self, *k, *y, geom)
    }

    fn shortcut(&mut self, x: &NodeId, map: ShortcutMap) -> Result<NodeId> {
        Graph::shortcut(self, *x, map)
    }

    fn shortcut_t(&mut self, y: &NodeId, map: ShortcutMap) -> Result<NodeId> {
        Graph::shortcut_t(self, *y, map)
    }

    fn reshape(&mut self, x: &NodeId, shape: &[usize]) -> Result<NodeId> {
        Graph::reshape(self, *x, shape)
    }

    fn scale_axis(&mut self, x: &NodeId, s: &NodeId, axis: usize) -> Result<NodeId> {
        Graph::scale_axis(self, *x, *s, axis)
    }

    fn threshold(&mut self, x: &NodeId, lambda: &NodeId) -> Result<NodeId> {
        Graph::threshold(self, *x, *lambda)
    }

    fn global_average_pool(&mut self, x: &NodeId) -> Result<NodeId> {
        Graph::global_average_pool(self, *x)
    }

    fn half_sq_norm(&mut self, x: &NodeId) -> Result<NodeId> {
        Graph::half_sq_norm(self, *x)
    }

    fn cross_entropy(&mut self, logits: &NodeId, label: usize) -> Result<NodeId> {
        Graph::cross_entropy(self, *logits, label)
    }
}
