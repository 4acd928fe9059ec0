//! Inference algorithms: feed-forward thresholding, layer-wise basis
//! pursuit and global deep pursuit.
//!
//! Every algorithm is written once over [`Backend`], so the same code
//! produces plain values ([`Eager`]) or a differentiable tape
//! ([`Graph`](crate::autodiff::Graph)).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::dictionary::{self, Lipschitz, NetworkSpec, SkipKind};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{ConvGeometry, ShortcutMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PursuitMode {
    /// Layered thresholding pursuit: one feed-forward pass.
    #[serde(rename = "L-TP")]
    Ltp,
    /// Layered basis pursuit: per-layer ISTA, layer after layer.
    #[serde(rename = "L-BP")]
    Lbp,
    /// Deep pursuit: block coordinate descent on the global objective.
    #[serde(rename = "DP")]
    Dp,
    /// Deep pursuit on the residual topology.
    #[serde(rename = "DP-res", alias = "DP-skip")]
    DpSkip,
}

impl PursuitMode {
    pub const ALL: [PursuitMode; 4] = [PursuitMode::Ltp, PursuitMode::Lbp, PursuitMode::Dp, PursuitMode::DpSkip];

    pub fn name(self) -> &'static str {
        match self {
            PursuitMode::Ltp => "L-TP",
            PursuitMode::Lbp => "L-BP",
            PursuitMode::Dp => "DP",
            PursuitMode::DpSkip => "DP-res",
        }
    }

    /// Whether the mode runs on the residual version of a network.
    pub fn uses_residuals(self) -> bool {
        self == PursuitMode::DpSkip
    }
}

impl fmt::Display for PursuitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PursuitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L-TP" | "LTP" => Ok(PursuitMode::Ltp),
            "L-BP" | "LBP" => Ok(PursuitMode::Lbp),
            "DP" => Ok(PursuitMode::Dp),
            "DP-RES" | "DP-SKIP" => Ok(PursuitMode::DpSkip),
            _ => Err(Error::InvalidArgument(format!(
                "unknown pursuit mode {s:?} (expected L-TP, L-BP, DP or DP-res)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PursuitConfig {
    pub mode: PursuitMode,
    pub iterations: usize,
    /// Extrapolation weights: empty means 0, one value applies to every
    /// layer, otherwise one per layer.
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub trace: bool,
}

impl PursuitConfig {
    pub fn new(mode: PursuitMode, iterations: usize) -> Self {
        PursuitConfig {
            mode,
            iterations,
            alpha: Vec::new(),
            trace: false,
        }
    }

    pub fn traced(mut self) -> Self {
        self.trace = true;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = vec![alpha];
        self
    }

    pub fn alpha(&self, j: usize) -> f64 {
        match self.alpha.len() {
            0 => 0.0,
            1 => self.alpha[0],
            _ => self.alpha[j - 1],
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.alpha.len() > 1 && self.alpha.len() != depth {
            return Err(Error::InvalidArgument(format!(
                "{} extrapolation weights for {depth} layers",
                self.alpha.len()
            )));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("extrapolation weight {a} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Objective and residual histories of one pursuit run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// Global objective after initialization and after every iteration.
    pub objective: Vec<f64>,
    /// `residuals[j-1][t] = ‖t_j − B_j w_j‖₂` on the iteration-`t` state.
    pub residuals: Vec<Vec<f64>>,
    /// Layer-wise basis pursuit only: each layer's own LASSO objective
    /// against the target it was solved for.
    pub layer_objectives: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct PursuitState<V> {
    pub codes: Vec<V>,
    pub trace: Option<Trace>,
}

impl<V> PursuitState<V> {
    pub fn output(&self) -> &V {
        self.codes.last().expect("pursuit state has at least one layer")
    }
}

/// Per-layer matrix `[l, T+1]` of reconstruction residual norms.
pub fn reconstruction_trace<V>(state: &PursuitState<V>) -> Result<&[Vec<f64>]> {
    state
        .trace
        .as_ref()
        .map(|t| t.residuals.as_slice())
        .ok_or(Error::TraceDisabled)
}

/// Normalization statistics frozen for one forward pass. Layer `j`'s
/// pre-activation `z` becomes `s·(z − mean)·inv_std`, which is folded into
/// an effective dictionary and threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNorm {
    pub mean: Vec<Tensor>,
    pub inv_std: Vec<Tensor>,
}

impl FrozenNorm {
    pub const EPS: f64 = 1e-5;

    pub fn from_running(params: &ModelParams) -> Self {
        FrozenNorm {
            mean: params.running_mean.clone(),
            inv_std: params
                .running_var
                .iter()
                .map(|v| v.map(|x| 1.0 / (x + Self::EPS).sqrt()))
                .collect(),
        }
    }
}

/// Parameter handles for one backend. `raw` follows
/// [`ModelParams::named`] order; `dicts` and `lambdas` are the effective
/// values after any normalization folding.
#[derive(Clone, Debug)]
pub struct Bound<V> {
    pub raw: Vec<V>,
    pub dicts: Vec<V>,
    pub lambdas: Vec<V>,
    pub betas: Vec<V>,
    pub skips: Vec<Option<V>>,
    pub classifier: V,
}

/// A network ready for inference: topology, parameters, frozen
/// normalization and per-layer step constants.
#[derive(Clone, Debug)]
pub struct Engine<'a> {
    spec: &'a NetworkSpec,
    params: &'a ModelParams,
    norm: Option<FrozenNorm>,
    geoms: Vec<Option<ConvGeometry>>,
    maps: Vec<Option<ShortcutMap>>,
    lipschitz: Vec<Lipschitz>,
    inv_l: Vec<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(spec: &'a NetworkSpec, params: &'a ModelParams, norm: Option<FrozenNorm>) -> Result<Self> {
        let mut e = Self::structural(spec, params, norm)?;
        let mut eager = Eager::new();
        let bound = e.bind(&mut eager, false)?;
        let skips: Vec<Option<Tensor>> = bound.skips.clone();
        for j in 1..=spec.depth() {
            let l = dictionary::lipschitz_constant(spec, &bound.dicts, &skips, j)?;
            e.inv_l.push(if l.value > 0.0 { 1.0 / l.value } else { 0.0 });
            e.lipschitz.push(l);
        }
        Ok(e)
    }

    /// Like [`Engine::new`] with the step constants given rather than
    /// computed, e.g. to hold them fixed while parameters are perturbed.
    pub fn with_lipschitz(
        spec: &'a NetworkSpec,
        params: &'a ModelParams,
        norm: Option<FrozenNorm>,
        lipschitz: &[Lipschitz],
    ) -> Result<Self> {
        if lipschitz.len() != spec.depth() {
            return Err(Error::Shape(format!("{} step constants for {} layers", lipschitz.len(), spec.depth())));
        }
        let mut e = Self::structural(spec, params, norm)?;
        e.inv_l = lipschitz
            .iter()
            .map(|l| if l.value > 0.0 { 1.0 / l.value } else { 0.0 })
            .collect();
        e.lipschitz = lipschitz.to_vec();
        Ok(e)
    }

    /// Without step constants; enough for feed-forward passes and
    /// objective evaluation.
    pub(crate) fn structural(spec: &'a NetworkSpec, params: &'a ModelParams, norm: Option<FrozenNorm>) -> Result<Self> {
        spec.validate()?;
        params.check(spec)?;
        if let Some(n) = &norm {
            if n.mean.len() != spec.depth() || n.inv_std.len() != spec.depth() {
                return Err(Error::Shape("normalization statistics do not cover every layer".into()));
            }
        }
        let geoms = spec
            .layers
            .iter()
            .map(|l| l.geometry())
            .collect::<Result<Vec<_>>>()?;
        let maps = spec
            .skips
            .iter()
            .map(|s| match s.kind {
                SkipKind::Shortcut => spec.shortcut_map(s.source, s.target).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Engine {
            spec,
            params,
            norm,
            geoms,
            maps,
            lipschitz: Vec::new(),
            inv_l: Vec::new(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.spec
    }

    pub fn lipschitz(&self) -> &[Lipschitz] {
        &self.lipschitz
    }

    pub fn norm(&self) -> Option<&FrozenNorm> {
        self.norm.as_ref()
    }

    /// Parameters with the normalization folded into dictionaries and
    /// thresholds, i.e. the operators the pursuit actually uses.
    pub fn effective_params(&self) -> Result<ModelParams> {
        let mut e = Eager::new();
        let bd = self.bind(&mut e, false)?;
        let mut p = self.params.clone();
        p.dictionaries = bd.dicts;
        p.lambdas = bd.lambdas;
        Ok(p)
    }

    /// Registers the parameters with `b`. With `track_params` the trainable
    /// tensors become differentiable leaves; otherwise everything is a
    /// constant.
    pub fn bind<B: Backend>(&self, b: &mut B, track_params: bool) -> Result<Bound<B::V>> {
        let named = self.params.named();
        let raw: Vec<B::V> = named
            .iter()
            .map(|(_, role, t)| {
                if track_params && role.trainable() {
                    b.leaf((*t).clone())
                } else {
                    b.constant((*t).clone())
                }
            })
            .collect();
        let l = self.spec.depth();
        let learned = self.params.skips.iter().filter(|s| s.is_some()).count();
        let lambda0 = l + learned;
        let beta0 = lambda0 + l;
        let scale0 = beta0 + l;
        let mut dicts = Vec::with_capacity(l);
        let mut lambdas = Vec::with_capacity(l);
        for j in 0..l {
            let (d, lam) = match &self.norm {
                None => (raw[j].clone(), raw[lambda0 + j].clone()),
                Some(n) => {
                    let s = &raw[scale0 + j];
                    let inv = b.constant(n.inv_std[j].clone());
                    let f = b.mul(s, &inv)?;
                    let d = b.scale_axis(&raw[j], &f, self.spec.layers[j].atom_axis())?;
                    let shift = b.constant(n.mean[j].mul(&n.inv_std[j])?);
                    let sm = b.mul(s, &shift)?;
                    (d, b.add(&raw[lambda0 + j], &sm)?)
                }
            };
            dicts.push(d);
            lambdas.push(lam);
        }
        let betas = raw[beta0..beta0 + l].to_vec();
        let mut next = l;
        let skips = self
            .params
            .skips
            .iter()
            .map(|s| {
                s.as_ref().map(|_| {
                    next += 1;
                    raw[next - 1].clone()
                })
            })
            .collect();
        let classifier = raw.last().expect("classifier is always present").clone();
        Ok(Bound {
            raw,
            dicts,
            lambdas,
            betas,
            skips,
            classifier,
        })
    }

    /// `B_j w`, shaped like layer `j`'s target.
    fn synth<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, j: usize, w: &B::V) -> Result<B::V> {
        let layer = self.spec.layer(j);
        match self.geoms[j - 1] {
            Some(g) => {
                let w = b.conform(w, &layer.output)?;
                b.conv_transpose(&bd.dicts[j - 1], &w, g)
            }
            None => {
                let w = b.conform(w, &[layer.output_len()])?;
                let y = b.matvec(&bd.dicts[j - 1], &w)?;
                b.conform(&y, &layer.input)
            }
        }
    }

    /// `B_jᵀ u`, shaped like `w_j`.
    pub(crate) fn analysis<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, j: usize, u: &B::V) -> Result<B::V> {
        let layer = self.spec.layer(j);
        match self.geoms[j - 1] {
            Some(g) => {
                let u = b.conform(u, &layer.input)?;
                b.conv(&bd.dicts[j - 1], &u, g)
            }
            None => {
                let u = b.conform(u, &[layer.input_len()])?;
                let y = b.matvec_t(&bd.dicts[j - 1], &u)?;
                b.conform(&y, &layer.output)
            }
        }
    }

    /// Contribution `B_mnᵀ w_n` of skip `i` to its target layer.
    fn skip_apply<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, i: usize, w: &B::V) -> Result<B::V> {
        let s = self.spec.skips[i];
        let target = &self.spec.layer(s.target).input;
        let y = match s.kind {
            SkipKind::Identity => w.clone(),
            SkipKind::Shortcut => {
                let map = self.maps[i].expect("shortcut map built");
                let w = b.conform(w, &map.source)?;
                b.shortcut(&w, map)?
            }
            SkipKind::LearnedDense => {
                let m = bd.skips[i].as_ref().expect("learned skip bound");
                let len = b.value(m).shape()[0];
                let w = b.conform(w, &[len])?;
                b.matvec_t(m, &w)?
            }
        };
        b.conform(&y, target)
    }

    /// Adjoint of [`Engine::skip_apply`], shaped like the source code.
    fn skip_adjoint<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, i: usize, u: &B::V) -> Result<B::V> {
        let s = self.spec.skips[i];
        let y = match s.kind {
            SkipKind::Identity => u.clone(),
            SkipKind::Shortcut => {
                let map = self.maps[i].expect("shortcut map built");
                let u = b.conform(u, &map.target)?;
                b.shortcut_t(&u, map)?
            }
            SkipKind::LearnedDense => {
                let m = bd.skips[i].as_ref().expect("learned skip bound");
                let len = b.value(m).shape()[1];
                let u = b.conform(u, &[len])?;
                b.matvec(m, &u)?
            }
        };
        b.conform(&y, self.spec.shape_of(s.source))
    }

    /// Reconstruction target of layer `j`: the previous code plus every
    /// skip ending at `j`. Reads `ws[..j-1]` only.
    pub(crate) fn target<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, j: usize, ws: &[B::V], x: &B::V) -> Result<B::V> {
        let prev = if j == 1 { x } else { &ws[j - 2] };
        let mut t = b.conform(prev, &self.spec.layer(j).input)?;
        for (i, s) in self.spec.skips.iter().enumerate() {
            if s.target == j {
                let c = self.skip_apply(b, bd, i, &ws[s.source - 1])?;
                t = b.add(&t, &c)?;
            }
        }
        Ok(t)
    }

    /// `t_j − B_j w_j`.
    fn residual<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, j: usize, ws: &[B::V], x: &B::V) -> Result<B::V> {
        let t = self.target(b, bd, j, ws, x)?;
        let bw = self.synth(b, bd, j, &ws[j - 1])?;
        b.sub(&t, &bw)
    }

    pub fn feed_forward<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, x: &B::V) -> Result<Vec<B::V>> {
        let mut ws = Vec::with_capacity(self.spec.depth());
        for j in 1..=self.spec.depth() {
            let t = self.target(b, bd, j, &ws, x)?;
            let z = self.analysis(b, bd, j, &t)?;
            ws.push(b.threshold(&z, &bd.lambdas[j - 1])?);
        }
        Ok(ws)
    }

    /// Gradient of the smooth part of the global objective with respect to
    /// block `j` at the state `ws`: the layer's own reconstruction term plus
    /// feedback from every layer that consumes `w_j`.
    pub fn block_gradient<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, j: usize, ws: &[B::V], x: &B::V) -> Result<B::V> {
        let r = self.residual(b, bd, j, ws, x)?;
        let neg = b.scale(&r, -1.0)?;
        let mut g = self.analysis(b, bd, j, &neg)?;
        if j < self.spec.depth() {
            let e = self.residual(b, bd, j + 1, ws, x)?;
            let e = b.conform(&e, self.spec.shape_of(j))?;
            g = b.add(&g, &e)?;
        }
        for (i, s) in self.spec.skips.iter().enumerate() {
            if s.source == j {
                let e = self.residual(b, bd, s.target, ws, x)?;
                let e = self.skip_adjoint(b, bd, i, &e)?;
                g = b.add(&g, &e)?;
            }
        }
        Ok(g)
    }

    /// `φ̃_{λ/(βL)}(w − g / (β L))`, the proximal step of the ℓ1 penalty.
    fn prox_step<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, j: usize, w: &B::V, g: &B::V) -> Result<B::V> {
        let step = b.div_scalar(g, &bd.betas[j - 1], self.inv_l[j - 1])?;
        let pre = b.sub(w, &step)?;
        let thr = b.div_scalar(&bd.lambdas[j - 1], &bd.betas[j - 1], self.inv_l[j - 1])?;
        b.threshold(&pre, &thr)
    }

    fn require_steps(&self) -> Result<()> {
        if self.inv_l.len() != self.spec.depth() {
            return Err(Error::InvalidArgument("engine was built without step constants".into()));
        }
        Ok(())
    }

    pub fn run<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, x: &B::V, config: &PursuitConfig) -> Result<PursuitState<B::V>> {
        config.validate(self.spec.depth())?;
        let x = b.conform(x, &self.spec.input)?;
        match config.mode {
            PursuitMode::Ltp => {
                let codes = self.feed_forward(b, bd, &x)?;
                let trace = if config.trace {
                    Some(self.trace_of(b, bd, &x, std::slice::from_ref(&codes), None)?)
                } else {
                    None
                };
                Ok(PursuitState { codes, trace })
            }
            PursuitMode::Lbp => self.layered(b, bd, &x, config),
            PursuitMode::Dp | PursuitMode::DpSkip => self.deep(b, bd, &x, config),
        }
    }

    fn layered<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, x: &B::V, config: &PursuitConfig) -> Result<PursuitState<B::V>> {
        if !self.spec.is_chain() {
            return Err(Error::Topology(
                "layered basis pursuit solves each layer on its own and cannot use skip connections".into(),
            ));
        }
        self.require_steps()?;
        let l = self.spec.depth();
        let steps = config.iterations;
        let mut ws = self.feed_forward(b, bd, x)?;
        // history[j][t]: iterate t of layer j, only kept when tracing
        let mut history: Vec<Vec<B::V>> = Vec::new();
        let mut layer_objectives = Vec::new();
        for j in 1..=l {
            let t = self.target(b, bd, j, &ws, x)?;
            let mut hist = Vec::new();
            if config.trace {
                hist.push(ws[j - 1].clone());
            }
            for _ in 0..steps {
                let bw = self.synth(b, bd, j, &ws[j - 1])?;
                let r = b.sub(&bw, &t)?;
                let g = self.analysis(b, bd, j, &r)?;
                ws[j - 1] = self.prox_step(b, bd, j, &ws[j - 1], &g)?;
                if config.trace {
                    hist.push(ws[j - 1].clone());
                }
            }
            if config.trace {
                let mut e = Eager::new();
                let eb = values_of(b, bd);
                let tv = b.value(&t).clone();
                let mut objs = Vec::with_capacity(hist.len());
                for w in &hist {
                    let wv = b.value(w).clone();
                    let bw = self.synth(&mut e, &eb, j, &wv)?;
                    let r = tv.sub(&bw)?;
                    objs.push(0.5 * r.norm().powi(2) + penalty(&eb.lambdas[j - 1], &wv));
                }
                layer_objectives.push(objs);
                history.push(hist);
            }
        }
        let trace = if config.trace {
            let states: Vec<Vec<B::V>> = (0..=steps)
                .map(|t| history.iter().map(|h| h[t].clone()).collect())
                .collect();
            Some(self.trace_of(b, bd, x, &states, Some(layer_objectives))?)
        } else {
            None
        };
        Ok(PursuitState { codes: ws, trace })
    }

    fn deep<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, x: &B::V, config: &PursuitConfig) -> Result<PursuitState<B::V>> {
        self.require_steps()?;
        let l = self.spec.depth();
        let mut ws = self.feed_forward(b, bd, x)?;
        let mut prev = ws.clone();
        let mut states = Vec::new();
        if config.trace {
            states.push(ws.clone());
        }
        for _ in 0..config.iterations {
            for j in 1..=l {
                let alpha = config.alpha(j);
                let current = ws[j - 1].clone();
                if alpha > 0.0 {
                    let d = b.sub(&current, &prev[j - 1])?;
                    let d = b.scale(&d, alpha)?;
                    ws[j - 1] = b.add(&current, &d)?;
                }
                let g = self.block_gradient(b, bd, j, &ws, x)?;
                let updated = self.prox_step(b, bd, j, &ws[j - 1], &g)?;
                prev[j - 1] = current;
                ws[j - 1] = updated;
            }
            if config.trace {
                states.push(ws.clone());
            }
        }
        let trace = if config.trace {
            Some(self.trace_of(b, bd, x, &states, None)?)
        } else {
            None
        };
        Ok(PursuitState { codes: ws, trace })
    }

    /// Evaluates traces on the side with a separate eager backend so the
    /// main computation (and its fingerprint) is untouched.
    fn trace_of<B: Backend>(
        &self,
        b: &B,
        bd: &Bound<B::V>,
        x: &B::V,
        states: &[Vec<B::V>],
        layer_objectives: Option<Vec<Vec<f64>>>,
    ) -> Result<Trace> {
        let eb = values_of(b, bd);
        let xv = b.value(x).clone();
        let mut e = Eager::new();
        let l = self.spec.depth();
        let mut objective = Vec::with_capacity(states.len());
        let mut residuals = vec![Vec::with_capacity(states.len()); l];
        for state in states {
            let ws: Vec<Tensor> = state.iter().map(|w| b.value(w).clone()).collect();
            let mut total = 0.0;
            for j in 1..=l {
                let r = self.residual(&mut e, &eb, j, &ws, &xv)?.norm();
                residuals[j - 1].push(r);
                total += 0.5 * r * r + penalty(&eb.lambdas[j - 1], &ws[j - 1]);
            }
            objective.push(total);
        }
        Ok(Trace {
            objective,
            residuals,
            layer_objectives,
        })
    }

    /// `½ Σ_j ‖t_j − B_j w_j‖²` as a differentiable scalar.
    pub fn smooth_objective<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, ws: &[B::V], x: &B::V) -> Result<B::V> {
        let x = b.conform(x, &self.spec.input)?;
        let mut total: Option<B::V> = None;
        for j in 1..=self.spec.depth() {
            let r = self.residual(b, bd, j, ws, &x)?;
            let h = b.half_sq_norm(&r)?;
            total = Some(match total {
                None => h,
                Some(t) => b.add(&t, &h)?,
            });
        }
        Ok(total.expect("validated spec has layers"))
    }

    /// Classifier logits `Aᵀ f` from the last code, pooled for
    /// convolutional outputs.
    pub fn logits<B: Backend>(&self, b: &mut B, bd: &Bound<B::V>, out: &B::V) -> Result<B::V> {
        let f = if self.spec.pools_features() {
            b.global_average_pool(out)?
        } else {
            b.conform(out, &[self.spec.features()])?
        };
        b.matvec_t(&bd.classifier, &f)
    }
}

fn values_of<B: Backend>(b: &B, bd: &Bound<B::V>) -> Bound<Tensor> {
    let v = |x: &B::V| b.value(x).clone();
    Bound {
        raw: Vec::new(),
        dicts: bd.dicts.iter().map(v).collect(),
        lambdas: bd.lambdas.iter().map(v).collect(),
        betas: bd.betas.iter().map(v).collect(),
        skips: bd.skips.iter().map(|s| s.as_ref().map(v)).collect(),
        classifier: v(&bd.classifier),
    }
}

/// `Σ λ_c |w|` with one threshold per channel.
fn penalty(lambda: &Tensor, w: &Tensor) -> f64 {
    let c = lambda.len();
    let spatial = w.len() / c;
    w.data()
        .iter()
        .enumerate()
        .map(|(i, v)| lambda.data()[i / spatial] * v.abs())
        .sum()
}

fn check_lambda(lambda: &Tensor) -> Result<()> {
    if lambda.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("threshold λ must be non-negative".into()));
    }
    Ok(())
}

fn per_element(x: &Tensor, lambda: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    let c = lambda.len();
    if c == 0 || (c != 1 && x.channels() != c) {
        return Err(Error::Shape(format!(
            "{} thresholds for input {:?}",
            c,
            x.shape()
        )));
    }
    let spatial = x.len() / c;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, lambda.data()[if c == 1 { 0 } else { i / spatial }]))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Proximal operator of `λ‖·‖₁`. `lambda` holds one value or one per
/// channel.
pub fn soft_threshold(x: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    per_element(x, lambda, |v, l| {
        if v > l {
            v - l
        } else if v < -l {
            v + l
        } else {
            0.0
        }
    })
}

/// Proximal operator of `λ‖·‖₁` plus the constraint `w ≥ 0`; equal to
/// `ReLU(x − λ)`.
pub fn nonneg_soft_threshold(x: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    per_element(x, lambda, |v, l| (v - l).max(0.0))
}

/// Everything runs on pure parameters (no normalization).
pub fn feed_forward(x: &Tensor, params: &ModelParams, spec: &NetworkSpec) -> Result<PursuitState<Tensor>> {
    let engine = Engine::structural(spec, params, None)?;
    let mut e = Eager::new();
    let bd = engine.bind(&mut e, false)?;
    let x = e.conform(x, &spec.input)?;
    Ok(PursuitState {
        codes: engine.feed_forward(&mut e, &bd, &x)?,
        trace: None,
    })
}

pub fn layered_basis_pursuit(x: &Tensor, params: &ModelParams, spec: &NetworkSpec, config: &PursuitConfig) -> Result<PursuitState<Tensor>> {
    let config = PursuitConfig {
        mode: PursuitMode::Lbp,
        ..config.clone()
    };
    run_pursuit(x, params, spec, &config)
}

pub fn deep_pursuit(x: &Tensor, params: &ModelParams, spec: &NetworkSpec, config: &PursuitConfig) -> Result<PursuitState<Tensor>> {
    let mode = if config.mode == PursuitMode::DpSkip {
        PursuitMode::DpSkip
    } else {
        PursuitMode::Dp
    };
    run_pursuit(x, params, spec, &PursuitConfig { mode, ..config.clone() })
}

pub fn run_pursuit(x: &Tensor, params: &ModelParams, spec: &NetworkSpec, config: &PursuitConfig) -> Result<PursuitState<Tensor>> {
    let engine = Engine::new(spec, params, None)?;
    let mut e = Eager::new();
    let bd = engine.bind(&mut e, false)?;
    engine.run(&mut e, &bd, x, config)
}

/// Global non-negative LASSO objective of `codes` on pure parameters.
pub fn global_objective(x: &Tensor, codes: &[Tensor], params: &ModelParams, spec: &NetworkSpec) -> Result<f64> {
    let engine = Engine::structural(spec, params, None)?;
    if codes.len() != spec.depth() {
        return Err(Error::Shape(format!("{} code blocks for {} layers", codes.len(), spec.depth())));
    }
    let mut e = Eager::new();
    let bd = engine.bind(&mut e, false)?;
    let x = e.conform(x, &spec.input)?;
    let smooth = engine.smooth_objective(&mut e, &bd, codes, &x)?;
    let pen: f64 = codes.iter().zip(&bd.lambdas).map(|(w, l)| penalty(l, w)).sum();
    Ok(smooth.data()[0] + pen)
}

/// Hand-coded block gradient of the smooth global objective.
pub fn block_gradient(x: &Tensor, codes: &[Tensor], params: &ModelParams, spec: &NetworkSpec, j: usize) -> Result<Tensor> {
    let engine = Engine::structural(spec, params, None)?;
    if j == 0 || j > spec.depth() || codes.len() != spec.depth() {
        return Err(Error::InvalidArgument(format!("block {j} of {} with {} codes", spec.depth(), codes.len())));
    }
    let mut e = Eager::new();
    let bd = engine.bind(&mut e, false)?;
    let x = e.conform(x, &spec.input)?;
    engine.block_gradient(&mut e, &bd, j, codes, &x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IstaInit {
    Zero,
    /// `φ̃(Bᵀx)` (non-negative) or `soft(Bᵀx)`.
    FeedForward,
}

/// Iterates of ISTA on `½‖x − Bw‖² + λ‖w‖₁` (with `w ≥ 0` when
/// `nonneg`), starting point included.
pub fn ista_trajectory(
    b: &Tensor,
    x: &Tensor,
    lambda: &Tensor,
    iterations: usize,
    step: f64,
    nonneg: bool,
    init: IstaInit,
) -> Result<Vec<Tensor>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    check_lambda(lambda)?;
    let (_, n) = b.matrix_dims("ista")?;
    let prox = |v: &Tensor, lambda: &Tensor| {
        if nonneg {
            nonneg_soft_threshold(v, lambda)
        } else {
            soft_threshold(v, lambda)
        }
    };
    let mut e = Eager::new();
    let mut w = match init {
        IstaInit::Zero => Tensor::zeros(&[n]),
        IstaInit::FeedForward => prox(&e.matvec_t(b, x)?, lambda)?,
    };
    let shrink = lambda.scale(step);
    let mut out = vec![w.clone()];
    for _ in 0..iterations {
        let bw = e.matvec(b, &w)?;
        let r = bw.sub(x)?;
        let g = e.matvec_t(b, &r)?;
        let pre = w.sub(&g.scale(step))?;
        w = prox(&pre, &shrink)?;
        out.push(w.clone());
    }
    Ok(out)
}

pub fn ista_solve(b: &Tensor, x: &Tensor, lambda: &Tensor, iterations: usize, step: f64, nonneg: bool) -> Result<Tensor> {
    Ok(ista_trajectory(b, x, lambda, iterations, step, nonneg, IstaInit::Zero)?
        .pop()
        .expect("trajectory has a start point"))
}

/// `½‖x − Bw‖² + Σ λ|w|`.
pub fn lasso_objective(b: &Tensor, x: &Tensor, lambda: &Tensor, w: &Tensor) -> Result<f64> {
    let r = x.sub(&crate::tensor::linear_map(b, w)?)?;
    let pen = if lambda.len() == 1 {
        lambda.data()[0] * w.data().iter().map(|v| v.abs()).sum::<f64>()
    } else {
        penalty(lambda, w)
    };
    Ok(0.5 * r.norm().powi(2) + pen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    #[test]
    fn soft_threshold_examples() {
        let y = soft_threshold(&v(&[3.0, -3.0, 0.5]), &v(&[1.0])).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0, 0.0]);
        let x = v(&[0.3, -1.2, 4.0]);
        assert_eq!(soft_threshold(&x, &v(&[0.0])).unwrap(), x);
        assert_eq!(soft_threshold(&x, &v(&[10.0])).unwrap().data(), &[0.0; 3]);
        assert!(soft_threshold(&x, &v(&[-1.0])).is_err());
    }

    #[test]
    fn nonneg_threshold_examples() {
        assert_eq!(nonneg_soft_threshold(&v(&[2.0]), &v(&[0.5])).unwrap().data(), &[1.5]);
        assert_eq!(nonneg_soft_threshold(&v(&[0.2, -4.0]), &v(&[0.5])).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(nonneg_soft_threshold(&v(&[1.0, -1.0]), &v(&[0.0])).unwrap().data(), &[1.0, 0.0]);
        assert!(nonneg_soft_threshold(&v(&[1.0]), &v(&[-0.1])).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PursuitMode::ALL {
            assert_eq!(m.name().parse::<PursuitMode>().unwrap(), m);
        }
        assert_eq!("DP-skip".parse::<PursuitMode>().unwrap(), PursuitMode::DpSkip);
        assert!("ISTA".parse::<PursuitMode>().is_err());
    }

    #[test]
    fn feed_forward_identity_layer() {
        let spec = NetworkSpec::dense(&[2, 2], 2);
        let mut p = init_model(&spec, 0).unwrap();
        p.dictionaries[0] = Tensor::identity(2);
        p.lambdas[0] = v(&[1.0, 1.0]);
        let s = feed_forward(&v(&[3.0, 0.5]), &p, &spec).unwrap();
        assert_eq!(s.codes[0].data(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_zero_codes() {
        let spec = NetworkSpec::dense(&[4, 3, 2], 2);
        let p = init_model(&spec, 3).unwrap();
        let s = feed_forward(&Tensor::zeros(&[4]), &p, &spec).unwrap();
        assert!(s.codes.iter().all(|w| w.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn skip_adds_to_preactivation() {
        let spec = NetworkSpec::dense(&[3, 3, 3, 3], 2)
            .with_skip(1, 3, SkipKind::Identity)
            .unwrap();
        let mut p = init_model(&spec, 0).unwrap();
        for d in &mut p.dictionaries {
            *d = Tensor::identity(3);
        }
        for l in &mut p.lambdas {
            *l = Tensor::zeros(&[3]);
        }
        let s = feed_forward(&v(&[1.0, 2.0, 3.0]), &p, &spec).unwrap();
        // w1 = w2 = x, w3 = w2 + w1
        assert_eq!(s.codes[2].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn ista_identity_dictionary() {
        let w = ista_solve(&Tensor::identity(2), &v(&[3.0, 0.5]), &v(&[1.0]), 1, 1.0, false).unwrap();
        assert_eq!(w.data(), &[2.0, 0.0]);
        let w = ista_solve(&Tensor::identity(2), &v(&[3.0, -0.5]), &v(&[1.0]), 1, 1.0, true).unwrap();
        assert_eq!(w.data(), &[2.0, 0.0]);
        assert!(ista_solve(&Tensor::identity(2), &v(&[1.0, 1.0]), &v(&[1.0]), 1, 0.0, true).is_err());
    }

    #[test]
    fn lbp_rejects_skips() {
        let spec = NetworkSpec::dense(&[3, 3, 3, 3], 2)
            .with_skip(1, 3, SkipKind::Identity)
            .unwrap();
        let p = init_model(&spec, 0).unwrap();
        let err = layered_basis_pursuit(&v(&[1.0, 2.0, 3.0]), &p, &spec, &PursuitConfig::new(PursuitMode::Lbp, 2));
        assert!(matches!(err, Err(Error::Topology(_))));
    }

    #[test]
    fn trace_requires_flag() {
        let spec = NetworkSpec::dense(&[3, 2], 2);
        let p = init_model(&spec, 0).unwrap();
        let s = deep_pursuit(&v(&[1.0, 2.0, 3.0]), &p, &spec, &PursuitConfig::new(PursuitMode::Dp, 2)).unwrap();
        assert!(matches!(reconstruction_trace(&s), Err(Error::TraceDisabled)));
        let s = deep_pursuit(&v(&[1.0, 2.0, 3.0]), &p, &spec, &PursuitConfig::new(PursuitMode::Dp, 2).traced()).unwrap();
        let tr = reconstruction_trace(&s).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].len(), 3);
    }

    #[test]
    fn objective_of_zero_codes() {
        let spec = NetworkSpec::dense(&[3, 4, 2], 2);
        let p = init_model(&spec, 0).unwrap();
        let codes = vec![Tensor::zeros(&[4]), Tensor::zeros(&[2])];
        let x = v(&[1.0, -2.0, 2.0]);
        assert!((global_objective(&x, &codes, &p, &spec).unwrap() - 4.5).abs() < 1e-15);
    }
}
