//! Dense row-major `f64` arrays and the handful of linear operators the
//! pursuit networks are built from: matrix-vector products in both
//! directions, 2-D convolution and its adjoint, and global average pooling.
//!
//! Convolutions go through an explicit patch matrix (im2col). The same
//! index map is used to materialize a convolution as a dense matrix, so the
//! implicit and explicit operators agree by construction.

use crate::error::{Error, Result};

/// An n-dimensional array of 64-bit reals in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: the data length must equal the product of the
    /// extents and every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Constructor for values produced by internal arithmetic. Only the
    /// length is checked (in debug builds).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; for a `[c, h, w]` activation this is the channel count.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_len(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.expect_same_len(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn expect_same_len(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[k×n] = aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m×k] = a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// Synthesis product `B·w`. `w` may be a vector of length `d_in` (any
/// shape with that many elements) or a `[d_in, k]` matrix of stacked
/// columns.
pub fn linear_map(b: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (rows, cols) = b.matrix_dims("linear_map")?;
    if w.shape.len() == 2 && w.shape[0] == cols && w.len() != cols {
        let k = w.shape[1];
        return Ok(Tensor::from_parts(
            vec![rows, k],
            matmul(&b.data, &w.data, rows, cols, k),
        ));
    }
    if w.len() != cols {
        return Err(Error::shape(format!(
            "linear_map: B is {:?} but w is {:?}",
            b.shape, w.shape
        )));
    }
    Ok(Tensor::from_parts(
        vec![rows],
        matmul(&b.data, &w.data, rows, cols, 1),
    ))
}

/// Analysis product `Bᵀ·u`.
pub fn adjoint_map(b: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (rows, cols) = b.matrix_dims("adjoint_map")?;
    if u.shape.len() == 2 && u.shape[0] == rows && u.len() != rows {
        let k = u.shape[1];
        return Ok(Tensor::from_parts(
            vec![cols, k],
            matmul_tn(&b.data, &u.data, rows, cols, k),
        ));
    }
    if u.len() != rows {
        return Err(Error::shape(format!(
            "adjoint_map: B is {:?} but u is {:?}",
            b.shape, u.shape
        )));
    }
    Ok(Tensor::from_parts(
        vec![cols],
        matmul_tn(&b.data, &u.data, rows, cols, 1),
    ))
}

/// Shape bookkeeping for a zero-padded, square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Padding is `kernel / 2`, so stride 1 preserves the spatial extent and
    /// stride 2 halves it (rounding up).
    pub fn new(input: [usize; 3], out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::KernelSize(kernel));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!(
                "convolution stride must be 1 or 2, got {stride}"
            )));
        }
        let [c, h, w] = input;
        if c == 0 || h == 0 || w == 0 || out_channels == 0 {
            return Err(Error::shape(format!(
                "degenerate convolution: input {input:?}, {out_channels} output channels"
            )));
        }
        let pad = kernel / 2;
        Ok(ConvGeometry {
            in_channels: c,
            out_channels,
            in_h: h,
            in_w: w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    /// Rows of the patch matrix: one per (input channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the patch matrix: one per output pixel.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Flat input index read by patch row `r` at output position `p`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    pub fn source(&self, r: usize, p: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let c = r / kk;
        let ky = (r % kk) / self.kernel;
        let kx = r % self.kernel;
        let oy = p / self.out_w;
        let ox = p % self.out_w;
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((c * self.in_h + y as usize) * self.in_w + x as usize)
        }
    }

    /// Calls `f(patch index, input index)` for every in-bounds tap, in
    /// patch-matrix order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.positions();
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let base = ((c * self.kernel + ky) * self.kernel + kx) * cols;
                    for oy in 0..self.out_h {
                        let y = oy * self.stride + ky;
                        if y < self.pad || y - self.pad >= self.in_h {
                            continue;
                        }
                        let row = (c * self.in_h + y - self.pad) * self.in_w;
                        for ox in 0..self.out_w {
                            let x = ox * self.stride + kx;
                            if x < self.pad || x - self.pad >= self.in_w {
                                continue;
                            }
                            f(base + oy * self.out_w + ox, row + x - self.pad);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.patch_len() * self.positions()];
        self.for_each_tap(|i, s| out[i] = x[s]);
        out
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-add patches back.
    pub fn col2im(&self, cols_data: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len()];
        self.for_each_tap(|i, s| out[s] += cols_data[i]);
        out
    }

    fn check_kernel(&self, k: &Tensor) -> Result<()> {
        if k.shape != self.kernel_shape() {
            return Err(Error::shape(format!(
                "kernel {:?} does not match geometry {:?}",
                k.shape,
                self.kernel_shape()
            )));
        }
        Ok(())
    }

    /// Analysis direction (`Bᵀx`): cross-correlation of `x` with `k`.
    pub fn forward(&self, k: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.check_kernel(k)?;
        if x.len() != self.input_len() {
            return Err(Error::shape(format!(
                "conv2d: input {:?} does not match geometry {:?}",
                x.shape,
                self.input_shape()
            )));
        }
        let cols = self.im2col(&x.data);
        let out = matmul(&k.data, &cols, self.out_channels, self.patch_len(), self.positions());
        Ok(Tensor::from_parts(self.output_shape().to_vec(), out))
    }

    /// Synthesis direction (`Bw`): transposed convolution.
    pub fn transpose(&self, k: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.check_kernel(k)?;
        if y.len() != self.output_len() {
            return Err(Error::shape(format!(
                "conv2d_transpose: input {:?} does not match geometry {:?}",
                y.shape,
                self.output_shape()
            )));
        }
        let cols = matmul_tn(&k.data, &y.data, self.out_channels, self.patch_len(), self.positions());
        Ok(Tensor::from_parts(
            self.input_shape().to_vec(),
            self.col2im(&cols),
        ))
    }

    /// Gradient of `⟨g, forward(k, x)⟩` with respect to `k`.
    pub(crate) fn kernel_grad_forward(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let cols = self.im2col(x);
        matmul_nt(g, &cols, self.out_channels, self.positions(), self.patch_len())
    }

    /// Gradient of `⟨g, transpose(k, y)⟩` with respect to `k`.
    pub(crate) fn kernel_grad_transpose(&self, g: &[f64], y: &[f64]) -> Vec<f64> {
        let cols = self.im2col(g);
        matmul_nt(y, &cols, self.out_channels, self.positions(), self.patch_len())
    }

    /// Dense synthesis matrix `M` of shape `[input_len, output_len]` with
    /// `M·vec(w) = vec(transpose(k, w))` and `Mᵀ·vec(x) = vec(forward(k, x))`.
    pub fn materialize(&self, k: &Tensor) -> Result<Tensor> {
        self.check_kernel(k)?;
        let (rows, cols) = (self.input_len(), self.output_len());
        let positions = self.positions();
        let patch = self.patch_len();
        let mut m = vec![0.0; rows * cols];
        for co in 0..self.out_channels {
            for p in 0..positions {
                let col = co * positions + p;
                for r in 0..patch {
                    if let Some(s) = self.source(r, p) {
                        m[s * cols + col] += k.data[co * patch + r];
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![rows, cols], m))
    }
}

/// Parameter-free skip operator between activations of different shapes:
/// keeps every `stride`-th pixel and zero-pads the channel axis. With equal
/// shapes it is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortcutMap {
    pub source: [usize; 3],
    pub target: [usize; 3],
    pub stride: usize,
}

impl ShortcutMap {
    pub fn new(source: [usize; 3], target: [usize; 3]) -> Result<Self> {
        let [cs, hs, ws] = source;
        let [ct, ht, wt] = target;
        let stride = if ht == 0 { 0 } else { hs.div_ceil(ht) };
        if ct < cs || stride == 0 || hs.div_ceil(stride) != ht || ws.div_ceil(stride) != wt {
            return Err(Error::shape(format!(
                "no parameter-free shortcut from {source:?} to {target:?}"
            )));
        }
        Ok(ShortcutMap { source, target, stride })
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    fn source_index(&self, t: usize) -> Option<usize> {
        let [cs, hs, ws] = self.source;
        let [_, ht, wt] = self.target;
        let c = t / (ht * wt);
        if c >= cs {
            return None;
        }
        let y = (t / wt) % ht * self.stride;
        let x = t % wt * self.stride;
        Some((c * hs + y) * ws + x)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n: usize = self.target.iter().product();
        (0..n)
            .map(|t| self.source_index(t).map_or(0.0, |s| x[s]))
            .collect()
    }

    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.source.iter().product()];
        for (t, &v) in y.iter().enumerate() {
            if let Some(s) = self.source_index(t) {
                out[s] += v;
            }
        }
        out
    }

    /// Dense `[source_len, target_len]` matrix `S` with `Sᵀ·vec(x) = apply(x)`.
    pub fn materialize(&self) -> Tensor {
        let rows: usize = self.source.iter().product();
        let cols: usize = self.target.iter().product();
        let mut m = vec![0.0; rows * cols];
        for t in 0..cols {
            if let Some(s) = self.source_index(t) {
                m[s * cols + t] = 1.0;
            }
        }
        Tensor::from_parts(vec![rows, cols], m)
    }
}

fn image_shape(x: &Tensor, what: &str) -> Result<[usize; 3]> {
    match x.shape.as_slice() {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(Error::shape(format!("{what}: expected [c, h, w], got {s:?}"))),
    }
}

/// Same-padded cross-correlation of `x: [c_in, h, w]` with
/// `k: [c_out, c_in, s, s]` (`s` ∈ {1, 3}) at the given stride.
pub fn conv2d(k: &Tensor, x: &Tensor, stride: usize) -> Result<Tensor> {
    let input = image_shape(x, "conv2d")?;
    let (c_out, ks) = kernel_dims(k)?;
    ConvGeometry::new(input, c_out, ks, stride)?.forward(k, x)
}

/// Adjoint of [`conv2d`]; `in_hw` is the spatial extent of the original input.
pub fn conv2d_transpose(k: &Tensor, y: &Tensor, stride: usize, in_hw: (usize, usize)) -> Result<Tensor> {
    let (c_out, ks) = kernel_dims(k)?;
    let c_in = k.shape[1];
    let g = ConvGeometry::new([c_in, in_hw.0, in_hw.1], c_out, ks, stride)?;
    g.transpose(k, y)
}

fn kernel_dims(k: &Tensor) -> Result<(usize, usize)> {
    match k.shape.as_slice() {
        [c_out, _, kh, kw] if kh == kw => Ok((*c_out, *kh)),
        [_, _, kh, _] => Err(Error::KernelSize(*kh)),
        s => Err(Error::shape(format!("kernel must be 4-D, got {s:?}"))),
    }
}

/// Per-channel spatial mean of `[c, h, w]` (a vector is treated as
/// `[d, 1, 1]`).
pub fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    let c = x.channels();
    if c == 0 || x.is_empty() {
        return Err(Error::shape(format!("global_average_pool: empty input {:?}", x.shape)));
    }
    let spatial = x.len() / c;
    let data = x
        .data
        .chunks(spatial)
        .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
        .collect();
    Ok(Tensor::from_parts(vec![c], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_examples() {
        let w = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(linear_map(&Tensor::identity(3), &w).unwrap().data(), w.data());

        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_map(&b, &ones).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(linear_map(&z, &Tensor::vector(vec![5.0, -2.0]).unwrap()).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn adjoint_map_examples() {
        let u = Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(adjoint_map(&Tensor::identity(3), &u).unwrap().data(), u.data());
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e0 = Tensor::vector(vec![1.0, 0.0]).unwrap();
        assert_eq!(adjoint_map(&b, &e0).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn batched_linear_map() {
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let out = linear_map(&b, &w).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let b = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2]);
        let msg = linear_map(&b, &w).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn conv_zero_and_delta_kernels() {
        let x = Tensor::new(vec![1, 4, 5], (0..20).map(|v| v as f64).collect()).unwrap();
        let zero = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&zero, &x, 1).unwrap().data().iter().all(|&v| v == 0.0));

        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&delta, &x, 1).unwrap(), x);
    }

    #[test]
    fn conv_extent() {
        let x = Tensor::zeros(&[2, 7, 6]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        assert_eq!(conv2d(&k, &x, 1).unwrap().shape(), &[3, 7, 6]);
        assert_eq!(conv2d(&k, &x, 2).unwrap().shape(), &[3, 4, 3]);
        let k1 = Tensor::zeros(&[3, 2, 1, 1]);
        assert_eq!(conv2d(&k1, &x, 2).unwrap().shape(), &[3, 4, 3]);
    }

    #[test]
    fn conv_rejects_other_kernel_sizes() {
        let x = Tensor::zeros(&[1, 6, 6]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&k, &x, 1), Err(Error::KernelSize(5))));
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::full(&[2, 4, 4], 5.0);
        assert_eq!(global_average_pool(&x).unwrap().data(), &[5.0, 5.0]);
        let y = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_average_pool(&y).unwrap().data(), &[4.0]);
        let z = Tensor::new(vec![3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(global_average_pool(&z).unwrap().data(), z.data());
    }

    #[test]
    fn one_by_one_materializes_to_scaled_identity() {
        let g = ConvGeometry::new([1, 3, 3], 1, 1, 1).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let m = g.materialize(&k).unwrap();
        assert_eq!(m, Tensor::identity(9).scale(2.5));
    }

    #[test]
    fn delta_kernel_materializes_to_identity() {
        let g = ConvGeometry::new([2, 3, 4], 2, 3, 1).unwrap();
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        k.data_mut()[4] = 1.0; // (0, 0, 1, 1)
        k.data_mut()[9 * 3 + 4] = 1.0; // (1, 1, 1, 1)
        assert_eq!(g.materialize(&k).unwrap(), Tensor::identity(24));
    }

}
