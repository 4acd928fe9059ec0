//! Learned quantities of an unrolled pursuit network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dictionary::{NetworkSpec, SkipKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAMBDA_INIT: f64 = 0.01;
pub const BETA_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Dictionary,
    Skip,
    Threshold,
    StepMultiplier,
    NormScale,
    RunningMean,
    RunningVar,
    Classifier,
}

impl ParamRole {
    /// Running statistics are buffers, not optimized.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub fn decayed(self) -> bool {
        matches!(self, ParamRole::Dictionary | ParamRole::Skip | ParamRole::Classifier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `B_j`: dense `[d_{j-1}, d_j]` or conv kernels `[c_out, c_in, k, k]`.
    pub dictionaries: Vec<Tensor>,
    /// Aligned with `spec.skips`; `Some` only for learned blocks.
    pub skips: Vec<Option<Tensor>>,
    /// Per-channel thresholds `λ_j ≥ 0`.
    pub lambdas: Vec<Tensor>,
    /// Step multipliers `β_j`, each of shape `[1]`.
    pub betas: Vec<Tensor>,
    /// Normalization scale per channel (bn mode only).
    pub norm_scale: Vec<Tensor>,
    pub running_mean: Vec<Tensor>,
    pub running_var: Vec<Tensor>,
    /// `A`: `[features, classes]`; logits are `Aᵀ f`.
    pub classifier: Tensor,
}

impl ModelParams {
    pub fn depth(&self) -> usize {
        self.dictionaries.len()
    }

    /// Every tensor with its name and role, in declaration order.
    pub fn named(&self) -> Vec<(String, ParamRole, &Tensor)> {
        let mut out = Vec::new();
        for (j, t) in self.dictionaries.iter().enumerate() {
            out.push((format!("dict.{}", j + 1), ParamRole::Dictionary, t));
        }
        for (i, t) in self.skips.iter().enumerate() {
            if let Some(t) = t {
                out.push((format!("skip.{i}"), ParamRole::Skip, t));
            }
        }
        let groups: [(&str, ParamRole, &Vec<Tensor>); 5] = [
            ("lambda", ParamRole::Threshold, &self.lambdas),
            ("beta", ParamRole::StepMultiplier, &self.betas),
            ("norm_scale", ParamRole::NormScale, &self.norm_scale),
            ("running_mean", ParamRole::RunningMean, &self.running_mean),
            ("running_var", ParamRole::RunningVar, &self.running_var),
        ];
        for (name, role, ts) in groups {
            for (j, t) in ts.iter().enumerate() {
                out.push((format!("{name}.{}", j + 1), role, t));
            }
        }
        out.push(("classifier".into(), ParamRole::Classifier, &self.classifier));
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out: Vec<(ParamRole, &mut Tensor)> = Vec::new();
        out.extend(self.dictionaries.iter_mut().map(|t| (ParamRole::Dictionary, t)));
        out.extend(self.skips.iter_mut().flatten().map(|t| (ParamRole::Skip, t)));
        out.extend(self.lambdas.iter_mut().map(|t| (ParamRole::Threshold, t)));
        out.extend(self.betas.iter_mut().map(|t| (ParamRole::StepMultiplier, t)));
        out.extend(self.norm_scale.iter_mut().map(|t| (ParamRole::NormScale, t)));
        out.extend(self.running_mean.iter_mut().map(|t| (ParamRole::RunningMean, t)));
        out.extend(self.running_var.iter_mut().map(|t| (ParamRole::RunningVar, t)));
        out.push((ParamRole::Classifier, &mut self.classifier));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, _, t)| t.is_finite())
    }

    /// Checks that every tensor has the shape `spec` requires.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = init_model(spec, 0)?;
        let mine = self.named();
        let theirs = expected.named();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} tensors, spec needs {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((n, _, a), (m, _, b)) in mine.iter().zip(&theirs) {
            if n != m || a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {n} {:?} does not match {m} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Projects constrained parameters back onto their feasible sets:
    /// `λ ≥ 0`, `β ∈ [1e-3, 1]`, normalization scale `≥ 1e-3`.
    pub fn project(&mut self) {
        for l in &mut self.lambdas {
            for v in l.data_mut() {
                *v = v.max(0.0);
            }
        }
        for b in &mut self.betas {
            for v in b.data_mut() {
                *v = v.clamp(BETA_MIN, 1.0);
            }
        }
        for s in &mut self.norm_scale {
            for v in s.data_mut() {
                *v = v.max(BETA_MIN);
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Deterministic initialization. Dictionary entries are uniform on
/// `±1/(2√fan_in)`, so each atom starts with norm near 0.29.
pub fn init_model(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dictionaries = Vec::new();
    let mut lambdas = Vec::new();
    let mut betas = Vec::new();
    let mut norm_scale = Vec::new();
    let mut running_mean = Vec::new();
    let mut running_var = Vec::new();
    for layer in &spec.layers {
        let bound = 0.5 / (layer.fan_in() as f64).sqrt();
        dictionaries.push(uniform(&mut rng, &layer.dictionary_shape(), bound));
        let c = layer.channels();
        lambdas.push(Tensor::full(&[c], LAMBDA_INIT));
        betas.push(Tensor::full(&[1], 1.0));
        norm_scale.push(Tensor::full(&[c], 1.0));
        running_mean.push(Tensor::zeros(&[c]));
        running_var.push(Tensor::full(&[c], 1.0));
    }
    let skips = spec
        .skips
        .iter()
        .map(|s| match s.kind {
            SkipKind::LearnedDense => {
                let src: usize = spec.shape_of(s.source).iter().product();
                let dst = spec.target_len(s.target);
                Some(uniform(&mut rng, &[src, dst], 0.5 / (src as f64).sqrt()))
            }
            SkipKind::Identity | SkipKind::Shortcut => None,
        })
        .collect();
    let features = spec.features();
    let classifier = uniform(&mut rng, &[features, spec.classes], 1.0 / (features as f64).sqrt());
    Ok(ModelParams {
        dictionaries,
        skips,
        lambdas,
        betas,
        norm_scale,
        running_mean,
        running_var,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::dense(&[6, 5, 4], 3);
        assert_eq!(init_model(&spec, 7).unwrap(), init_model(&spec, 7).unwrap());
        assert_ne!(init_model(&spec, 7).unwrap(), init_model(&spec, 8).unwrap());
    }

    #[test]
    fn init_thresholds_and_steps() {
        let spec = NetworkSpec::appendix([3, 8, 8], 4, 1, 10).unwrap();
        let p = init_model(&spec, 1).unwrap();
        assert!(p.lambdas.iter().all(|l| l.data().iter().all(|&v| v == LAMBDA_INIT)));
        assert!(p.betas.iter().all(|b| b.data() == [1.0]));
        assert_eq!(p.lambdas[2].shape(), &[8]);
        assert_eq!(p.classifier.shape(), &[16, 10]);
        p.check(&spec).unwrap();
    }

    #[test]
    fn column_norm_band_for_fan_in_100() {
        let spec = NetworkSpec::dense(&[100, 20], 2);
        for seed in 0..100 {
            let p = init_model(&spec, seed).unwrap();
            let b = &p.dictionaries[0];
            for c in 0..20 {
                let n: f64 = (0..100).map(|r| b.data()[r * 20 + c].powi(2)).sum::<f64>().sqrt();
                assert!(n > 0.05 && n < 0.5, "seed {seed} column {c}: {n}");
            }
        }
    }

    #[test]
    fn projection() {
        let spec = NetworkSpec::dense(&[3, 2], 2);
        let mut p = init_model(&spec, 0).unwrap();
        p.lambdas[0].data_mut()[0] = -0.5;
        p.betas[0].data_mut()[0] = 3.0;
        p.project();
        assert_eq!(p.lambdas[0].data()[0], 0.0);
        assert_eq!(p.betas[0].data()[0], 1.0);
    }
}
