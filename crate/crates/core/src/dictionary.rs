//! Network topology, the block-structured global dictionary, and the
//! architectural diagnostics computed on it (mutual coherence, frame
//! potential, Welch bound, per-layer Lipschitz constants).
//!
//! Layers are indexed from 1; index 0 is the input signal. Layer `j` owns a
//! dictionary `B_j` that maps its code `w_j` back into the space of its
//! reconstruction target. The target of layer `j` is `w_{j-1}` plus the
//! contribution of every skip ending at `j`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::parallel::Exec;
use crate::tensor::{self, ConvGeometry, ShortcutMap, Tensor};

/// Explicit matrices beyond this many entries are refused.
pub const MATERIALIZE_LIMIT: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    Dense,
    Conv { kernel: usize, stride: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: OperatorKind,
    /// Shape of the reconstruction target (the layer's input).
    pub input: Vec<usize>,
    /// Shape of the layer's code `w_j`.
    pub output: Vec<usize>,
}

impl LayerSpec {
    pub fn dense(d_in: usize, d_out: usize) -> Self {
        LayerSpec {
            kind: OperatorKind::Dense,
            input: vec![d_in],
            output: vec![d_out],
        }
    }

    pub fn conv(input: [usize; 3], out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        let g = ConvGeometry::new(input, out_channels, kernel, stride)?;
        Ok(LayerSpec {
            kind: OperatorKind::Conv { kernel, stride },
            input: input.to_vec(),
            output: g.output_shape().to_vec(),
        })
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Number of atoms sharing a threshold: every output unit for dense
    /// layers, every filter for convolutional ones.
    pub fn channels(&self) -> usize {
        match self.kind {
            OperatorKind::Dense => self.output_len(),
            OperatorKind::Conv { .. } => self.output[0],
        }
    }

    pub fn geometry(&self) -> Result<Option<ConvGeometry>> {
        match self.kind {
            OperatorKind::Dense => Ok(None),
            OperatorKind::Conv { kernel, stride } => {
                let input = as_image(&self.input)
                    .ok_or_else(|| Error::Spec(format!("conv layer input {:?} is not [c, h, w]", self.input)))?;
                Ok(Some(ConvGeometry::new(input, self.output[0], kernel, stride)?))
            }
        }
    }

    pub fn dictionary_shape(&self) -> Vec<usize> {
        match self.kind {
            OperatorKind::Dense => vec![self.input_len(), self.output_len()],
            OperatorKind::Conv { kernel, .. } => vec![self.output[0], self.input[0], kernel, kernel],
        }
    }

    /// Axis of the dictionary tensor indexed by atom/filter.
    pub fn atom_axis(&self) -> usize {
        match self.kind {
            OperatorKind::Dense => 1,
            OperatorKind::Conv { .. } => 0,
        }
    }

    /// Number of entries sharing one input unit of each atom (fan-in).
    pub fn fan_in(&self) -> usize {
        match self.kind {
            OperatorKind::Dense => self.input_len(),
            OperatorKind::Conv { kernel, .. } => self.input[0] * kernel * kernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    /// `B_mn = I`; source and target sizes must agree.
    Identity,
    /// Parameter-free subsample and channel zero-pad (the identity when the
    /// shapes agree).
    Shortcut,
    /// Trainable dense block `B_mn` of shape `[len(w_n), len(target_m)]`.
    LearnedDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipSpec {
    pub source: usize,
    pub target: usize,
    pub kind: SkipKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub skips: Vec<SkipSpec>,
    pub classes: usize,
}

fn as_image(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        [d] => Some([d, 1, 1]),
        _ => None,
    }
}

impl NetworkSpec {
    /// Dense chain `dims[0] → dims[1] → … → dims[l]`.
    pub fn dense(dims: &[usize], classes: usize) -> Self {
        NetworkSpec {
            input: vec![dims.first().copied().unwrap_or(0)],
            layers: dims.windows(2).map(|w| LayerSpec::dense(w[0], w[1])).collect(),
            skips: Vec::new(),
            classes,
        }
    }

    /// Three blocks of `depth` units, each unit two 3×3 convolutions, with
    /// `width`, `2·width` and `4·width` filters. The first convolution of
    /// blocks 2 and 3 has stride 2. Chain topology; see
    /// [`NetworkSpec::with_unit_residuals`].
    pub fn appendix(input: [usize; 3], width: usize, depth: usize, classes: usize) -> Result<Self> {
        if width == 0 || depth == 0 {
            return Err(Error::Spec(format!("appendix network needs width, depth ≥ 1 (got {width}, {depth})")));
        }
        let mut layers = Vec::new();
        let mut shape = input;
        for block in 0..3 {
            let channels = width << block;
            for unit in 0..depth {
                for conv in 0..2 {
                    let stride = if block > 0 && unit == 0 && conv == 0 { 2 } else { 1 };
                    let layer = LayerSpec::conv(shape, channels, 3, stride)?;
                    shape = as_image(&layer.output).expect("conv output is an image");
                    layers.push(layer);
                }
            }
        }
        Ok(NetworkSpec {
            input: input.to_vec(),
            layers,
            skips: Vec::new(),
            classes,
        })
    }

    /// Adds a residual skip from each two-layer unit's input to the target
    /// of the unit's second layer. Units whose input is the raw signal get
    /// none. Matching shapes use [`SkipKind::Identity`]; downsampling units
    /// use the parameter-free [`SkipKind::Shortcut`].
    pub fn with_unit_residuals(&self) -> Result<Self> {
        let mut out = self.chain();
        let l = self.depth();
        let mut source = 2;
        while source + 2 <= l {
            let target = source + 2;
            let kind = if self.shape_of(source).iter().product::<usize>() == self.target_len(target)
                && as_image(self.shape_of(source)) == as_image(&self.layer(target).input)
            {
                Some(SkipKind::Identity)
            } else if self.shortcut_map(source, target).is_ok() {
                Some(SkipKind::Shortcut)
            } else {
                None
            };
            if let Some(kind) = kind {
                out.skips.push(SkipSpec { source, target, kind });
            }
            source += 2;
        }
        out.validate()?;
        Ok(out)
    }

    /// Same layers with every skip removed.
    pub fn chain(&self) -> Self {
        NetworkSpec {
            skips: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_skip(mut self, source: usize, target: usize, kind: SkipKind) -> Result<Self> {
        self.skips.push(SkipSpec { source, target, kind });
        self.validate()?;
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// 1-based layer access.
    pub fn layer(&self, j: usize) -> &LayerSpec {
        &self.layers[j - 1]
    }

    /// Shape of `w_j` (`j = 0` is the input).
    pub fn shape_of(&self, j: usize) -> &[usize] {
        if j == 0 {
            &self.input
        } else {
            &self.layers[j - 1].output
        }
    }

    pub fn target_len(&self, j: usize) -> usize {
        self.layer(j).input_len()
    }

    pub fn is_chain(&self) -> bool {
        self.skips.is_empty()
    }

    /// Dimension of the classifier input: channel count after pooling for
    /// convolutional outputs, the full code otherwise.
    pub fn features(&self) -> usize {
        let last = self.layers.last().expect("validated spec has layers");
        match last.kind {
            OperatorKind::Dense => last.output_len(),
            OperatorKind::Conv { .. } => last.output[0],
        }
    }

    pub fn pools_features(&self) -> bool {
        matches!(self.layers.last().map(|l| &l.kind), Some(OperatorKind::Conv { .. }))
    }

    pub fn has_outgoing_edges(&self, j: usize) -> bool {
        j < self.depth() || self.skips.iter().any(|s| s.source == j)
    }

    pub(crate) fn shortcut_map(&self, source: usize, target: usize) -> Result<ShortcutMap> {
        let src = as_image(self.shape_of(source));
        let dst = as_image(&self.layer(target).input);
        match (src, dst) {
            (Some(s), Some(d)) => ShortcutMap::new(s, d),
            _ => Err(Error::Spec(format!("skip {source}→{target}: shapes are not images or vectors"))),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    /// Checks every dimension chain and skip. Returns the spec unchanged on
    /// success so it can be used in builder position.
    pub fn validate(&self) -> Result<&Self> {
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        if self.classes == 0 {
            return Err(Error::Spec("network needs at least one output class".into()));
        }
        let input_len: usize = self.input.iter().product();
        if input_len == 0 {
            return Err(Error::Spec(format!("input shape {:?} is empty", self.input)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let j = i + 1;
            if layer.input_len() == 0 || layer.output_len() == 0 {
                return Err(Error::Spec(format!("layer {j} has an empty dimension")));
            }
            let prev: usize = self.shape_of(j - 1).iter().product();
            if prev != layer.input_len() {
                return Err(Error::Spec(format!(
                    "layer {j} expects input {:?} but layer {} produces {:?}",
                    layer.input,
                    j - 1,
                    self.shape_of(j - 1)
                )));
            }
            if let Some(g) = layer.geometry()? {
                if g.output_shape().as_slice() != layer.output.as_slice() {
                    return Err(Error::Spec(format!(
                        "layer {j} declares output {:?} but its convolution produces {:?}",
                        layer.output,
                        g.output_shape()
                    )));
                }
            }
        }
        let l = self.depth();
        for (i, s) in self.skips.iter().enumerate() {
            if s.source == 0 || s.target > l || s.target <= s.source {
                return Err(Error::Spec(format!(
                    "skip {}→{} must satisfy 1 ≤ source < target ≤ {l}",
                    s.source, s.target
                )));
            }
            if s.target == s.source + 1 {
                return Err(Error::Spec(format!(
                    "skip {}→{} duplicates the chain edge",
                    s.source, s.target
                )));
            }
            if self.skips[..i]
                .iter()
                .any(|o| o.source == s.source && o.target == s.target)
            {
                return Err(Error::Spec(format!("duplicate skip {}→{}", s.source, s.target)));
            }
            let src_len: usize = self.shape_of(s.source).iter().product();
            match s.kind {
                SkipKind::Identity => {
                    if src_len != self.target_len(s.target) {
                        return Err(Error::Spec(format!(
                            "identity skip {}→{}: source has {src_len} units but the target has {}",
                            s.source,
                            s.target,
                            self.target_len(s.target)
                        )));
                    }
                }
                SkipKind::Shortcut => {
                    self.shortcut_map(s.source, s.target).map_err(|e| {
                        Error::Spec(format!("shortcut skip {}→{}: {e}", s.source, s.target))
                    })?;
                }
                SkipKind::LearnedDense => {}
            }
        }
        Ok(self)
    }
}

/// Explicit matrix of layer `j`'s synthesis operator `B_j`
/// (`[target_len, code_len]`).
pub fn materialize_operator(layer: &LayerSpec, dictionary: &Tensor) -> Result<Tensor> {
    let entries = layer.input_len() * layer.output_len();
    if entries > MATERIALIZE_LIMIT {
        return Err(Error::TooLarge {
            entries,
            limit: MATERIALIZE_LIMIT,
        });
    }
    if dictionary.shape() != layer.dictionary_shape().as_slice() {
        return Err(Error::Shape(format!(
            "dictionary {:?} does not match layer shape {:?}",
            dictionary.shape(),
            layer.dictionary_shape()
        )));
    }
    match layer.geometry()? {
        None => Ok(dictionary.clone()),
        Some(g) => g.materialize(dictionary),
    }
}

/// Explicit matrix of the map `w_n ↦ B_mnᵀ w_n` for a skip.
pub(crate) fn skip_matrix(spec: &NetworkSpec, skip: &SkipSpec, block: Option<&Tensor>) -> Result<Tensor> {
    let rows = spec.target_len(skip.target);
    let cols: usize = spec.shape_of(skip.source).iter().product();
    match skip.kind {
        SkipKind::Identity => Ok(Tensor::identity(rows)),
        SkipKind::Shortcut => transpose(&spec.shortcut_map(skip.source, skip.target)?.materialize()),
        SkipKind::LearnedDense => {
            let m = block.ok_or_else(|| {
                Error::InvalidArgument(format!("skip {}→{} has no learned block", skip.source, skip.target))
            })?;
            if m.shape() != [cols, rows] {
                return Err(Error::Shape(format!(
                    "skip {}→{} block {:?}, expected [{cols}, {rows}]",
                    skip.source,
                    skip.target,
                    m.shape()
                )));
            }
            transpose(m)
        }
    }
}

fn transpose(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.matrix_dims("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// The explicit block matrix whose least-squares residual against
/// `[x; 0; …; 0]` equals the smooth part of the global objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDictionary {
    pub matrix: Tensor,
    /// `row_offsets[j-1]..row_offsets[j]` is row block `j` (target of layer `j`).
    pub row_offsets: Vec<usize>,
    /// `col_offsets[k-1]..col_offsets[k]` is column block `k` (code `w_k`).
    pub col_offsets: Vec<usize>,
}

impl GlobalDictionary {
    pub fn rows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn cols(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    /// Copy of block (`row_block`, `col_block`), both 1-based.
    pub fn block(&self, row_block: usize, col_block: usize) -> Tensor {
        let (r0, r1) = (self.row_offsets[row_block - 1], self.row_offsets[row_block]);
        let (c0, c1) = (self.col_offsets[col_block - 1], self.col_offsets[col_block]);
        let cols = self.cols();
        let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            out.extend_from_slice(&self.matrix.data()[r * cols + c0..r * cols + c1]);
        }
        Tensor::from_parts(vec![r1 - r0, c1 - c0], out)
    }

    pub fn nonzero_entries(&self) -> usize {
        self.matrix.data().iter().filter(|&&v| v != 0.0).count()
    }

    fn set_block(&mut self, row_block: usize, col_block: usize, m: &Tensor, sign: f64) {
        let r0 = self.row_offsets[row_block - 1];
        let c0 = self.col_offsets[col_block - 1];
        let cols = self.cols();
        let (br, bc) = (m.shape()[0], m.shape()[1]);
        let data = self.matrix.data_mut();
        for r in 0..br {
            for c in 0..bc {
                data[(r0 + r) * cols + c0 + c] = sign * m.data()[r * bc + c];
            }
        }
    }
}

pub fn assemble_global_dictionary(params: &ModelParams, spec: &NetworkSpec) -> Result<GlobalDictionary> {
    spec.validate()?;
    let l = spec.depth();
    let mut row_offsets = vec![0];
    let mut col_offsets = vec![0];
    for j in 1..=l {
        row_offsets.push(row_offsets[j - 1] + spec.target_len(j));
        col_offsets.push(col_offsets[j - 1] + spec.layer(j).output_len());
    }
    let (rows, cols) = (row_offsets[l], col_offsets[l]);
    let entries = rows * cols;
    if entries > MATERIALIZE_LIMIT {
        return Err(Error::TooLarge {
            entries,
            limit: MATERIALIZE_LIMIT,
        });
    }
    let mut gd = GlobalDictionary {
        matrix: Tensor::zeros(&[rows, cols]),
        row_offsets,
        col_offsets,
    };
    for j in 1..=l {
        let b = materialize_operator(spec.layer(j), &params.dictionaries[j - 1])?;
        gd.set_block(j, j, &b, 1.0);
        if j > 1 {
            gd.set_block(j, j - 1, &Tensor::identity(spec.target_len(j)), -1.0);
        }
    }
    for (i, skip) in spec.skips.iter().enumerate() {
        let m = skip_matrix(spec, skip, params.skips[i].as_ref())?;
        gd.set_block(skip.target, skip.source, &m, -1.0);
    }
    Ok(gd)
}

/// Coherence-type statistics over the column-normalized matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMetrics {
    /// Max |⟨d_i, d_j⟩| over distinct normalized columns.
    pub coherence: f64,
    /// Mean |⟨d_i, d_j⟩| over distinct normalized columns.
    pub frame_potential: f64,
    /// Zero-norm columns, excluded from both statistics.
    pub zero_columns: Vec<usize>,
}

pub fn column_metrics(d: &Tensor, exec: Exec) -> Result<ColumnMetrics> {
    let (rows, cols) = d.matrix_dims("column_metrics")?;
    let mut zero_columns = Vec::new();
    let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for c in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| d.data()[r * cols + c]).collect();
        let n = tensor::dot(&col, &col).sqrt();
        if n == 0.0 {
            zero_columns.push(c);
        } else {
            atoms.push(col.into_iter().map(|v| v / n).collect());
        }
    }
    let n = atoms.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 nonzero columns, found {n}"
        )));
    }
    let per_row = exec.map(0..n - 1, |i| {
        let mut max = 0.0f64;
        let mut sum = 0.0;
        for j in i + 1..n {
            let v = tensor::dot(&atoms[i], &atoms[j]).abs();
            max = max.max(v);
            sum += v;
        }
        (max, sum)
    });
    let (coherence, total) = per_row
        .into_iter()
        .fold((0.0f64, 0.0), |(m, s), (rm, rs)| (m.max(rm), s + rs));
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(ColumnMetrics {
        coherence: coherence.min(1.0),
        frame_potential: total / pairs,
        zero_columns,
    })
}

pub fn mutual_coherence(d: &Tensor) -> Result<f64> {
    Ok(column_metrics(d, Exec::default())?.coherence)
}

pub fn frame_potential(d: &Tensor) -> Result<f64> {
    Ok(column_metrics(d, Exec::default())?.frame_potential)
}

/// Lower bound on the mutual coherence of `cols` unit vectors in
/// `rows` dimensions; zero when they can be orthogonal.
pub fn welch_bound(rows: usize, cols: usize) -> Result<f64> {
    if rows < 1 || cols < 2 {
        return Err(Error::InvalidArgument(format!(
            "welch bound needs rows ≥ 1 and cols ≥ 2, got {rows}×{cols}"
        )));
    }
    if cols <= rows {
        return Ok(0.0);
    }
    let (m, n) = (rows as f64, cols as f64);
    Ok(((n - m) / (m * (n - 1.0))).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of the PSD operator `gram` acting on vectors of
/// length `n`, started from the normalized all-ones vector. Stops after 100
/// iterations or when the estimate changes by less than 1e-8 relative.
pub fn power_iteration(n: usize, gram: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<PowerIteration> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-8;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut est = 0.0;
    for it in 1..=MAX_ITER {
        let u = gram(&v)?;
        let norm = tensor::dot(&u, &u).sqrt();
        if norm == 0.0 {
            return Ok(PowerIteration {
                value: 0.0,
                iterations: it,
                converged: true,
            });
        }
        let done = (norm - est).abs() <= TOL * norm;
        est = norm;
        v = u.into_iter().map(|x| x / norm).collect();
        if done {
            return Ok(PowerIteration {
                value: est,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(PowerIteration {
        value: est,
        iterations: MAX_ITER,
        converged: false,
    })
}

/// `σ_max(B)²` for a layer operator, without materializing it.
pub fn spectral_norm_sq(layer: &LayerSpec, dictionary: &Tensor) -> Result<PowerIteration> {
    match layer.geometry()? {
        None => {
            let n = layer.output_len();
            power_iteration(n, |v| {
                let w = Tensor::from_parts(vec![n], v.to_vec());
                let bw = tensor::linear_map(dictionary, &w)?;
                Ok(tensor::adjoint_map(dictionary, &bw)?.into_data())
            })
        }
        Some(g) => power_iteration(g.output_len(), |v| {
            let w = Tensor::from_parts(g.output_shape().to_vec(), v.to_vec());
            let bw = g.transpose(dictionary, &w)?;
            Ok(g.forward(dictionary, &bw)?.into_data())
        }),
    }
}

/// Step-size constant for layer `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lipschitz {
    pub value: f64,
    /// False when some power iteration hit its cap; `value` is then the
    /// last estimate.
    pub converged: bool,
}

/// Bound on the curvature of the global objective along block `j`:
/// `σ_max(B_j)²` plus, for every edge leaving `j`, the squared norm of the
/// map carrying `w_j` into the downstream target (1 for chain edges,
/// identity and shortcut skips).
pub fn lipschitz_constant(spec: &NetworkSpec, dictionaries: &[Tensor], skips: &[Option<Tensor>], j: usize) -> Result<Lipschitz> {
    let own = spectral_norm_sq(spec.layer(j), &dictionaries[j - 1])?;
    let mut value = own.value;
    let mut converged = own.converged;
    if j < spec.depth() {
        value += 1.0;
    }
    for (i, s) in spec.skips.iter().enumerate().filter(|(_, s)| s.source == j) {
        match s.kind {
            SkipKind::Identity | SkipKind::Shortcut => value += 1.0,
            SkipKind::LearnedDense => {
                let m = skips[i].as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("skip {}→{} has no learned block", s.source, s.target))
                })?;
                let layer = LayerSpec::dense(m.shape()[0], m.shape()[1]);
                // σ_max(M) = σ_max(Mᵀ); iterate on the smaller Gram matrix.
                let p = spectral_norm_sq(&layer, m)?;
                value += p.value;
                converged &= p.converged;
            }
        }
    }
    Ok(Lipschitz { value, converged })
}
