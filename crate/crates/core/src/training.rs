//! Supervised training of unrolled pursuit networks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, AttackConfig};
use crate::autodiff::{self, Graph};
use crate::backend::{Backend, Eager};
use crate::data::Dataset;
use crate::dictionary::NetworkSpec;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelParams, ParamRole};
use crate::parallel::Exec;
use crate::pursuit::{Engine, FrozenNorm, PursuitConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// No normalization; the pursuit solves the plain global objective.
    Pure,
    /// Batch statistics from the feed-forward pass, frozen for all
    /// iterations; running averages at evaluation.
    Bn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pursuit: PursuitConfig,
    pub normalization: Normalization,
    /// Momentum of the running normalization statistics.
    pub bn_momentum: f64,
    /// Attack radius for the per-epoch adversarial accuracy, if any.
    pub eval_epsilon: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            pursuit: PursuitConfig::new(crate::pursuit::PursuitMode::Ltp, 0),
            normalization: Normalization::Pure,
            bn_momentum: 0.1,
            eval_epsilon: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need learning rate ≥ 0, momentum in [0, 1), weight decay ≥ 0 (got {}, {}, {})",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let frac = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Normalization statistics to use at evaluation time.
pub fn eval_norm(params: &ModelParams, mode: Normalization) -> Option<FrozenNorm> {
    match mode {
        Normalization::Pure => None,
        Normalization::Bn => Some(FrozenNorm::from_running(params)),
    }
}

/// Logits of one input; bn mode uses the running statistics.
pub fn forward_logits(
    x: &Tensor,
    params: &ModelParams,
    spec: &NetworkSpec,
    pursuit: &PursuitConfig,
    normalization: Normalization,
) -> Result<Tensor> {
    let engine = Engine::new(spec, params, eval_norm(params, normalization))?;
    let mut e = Eager::new();
    let bd = engine.bind(&mut e, false)?;
    let state = engine.run(&mut e, &bd, x, pursuit)?;
    engine.logits(&mut e, &bd, state.output())
}

/// Softmax cross-entropy with max subtraction.
pub fn loss_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    Ok(autodiff::cross_entropy_value(logits.data(), label)?.0)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-channel mean and inverse standard deviation of every layer's
/// feed-forward pre-activation over a batch. Layers are processed in
/// order, each normalized with its own batch statistics before feeding the
/// next.
pub fn batch_norm_stats(spec: &NetworkSpec, params: &ModelParams, xs: &[Tensor], exec: Exec) -> Result<(FrozenNorm, Vec<Tensor>)> {
    if xs.is_empty() {
        return Err(Error::Data("normalization statistics need a non-empty batch".into()));
    }
    let engine = Engine::structural(spec, params, None)?;
    let bd = engine.bind(&mut Eager::new(), false)?;
    let mut codes: Vec<Vec<Tensor>> = xs.iter().map(|_| Vec::new()).collect();
    let inputs = exec.try_map(0..xs.len(), |i| Eager::new().conform(&xs[i], &spec.input))?;
    let mut norm = FrozenNorm {
        mean: Vec::new(),
        inv_std: Vec::new(),
    };
    let mut variances = Vec::new();
    for j in 1..=spec.depth() {
        let z = exec.try_map(0..xs.len(), |i| {
            let mut e = Eager::new();
            let t = engine.target(&mut e, &bd, j, &codes[i], &inputs[i])?;
            engine.analysis(&mut e, &bd, j, &t)
        })?;
        let c = spec.layer(j).channels();
        let spatial = z[0].len() / c;
        let count = (spatial * z.len()) as f64;
        let mut mean = vec![0.0; c];
        for zi in &z {
            for (k, v) in zi.data().iter().enumerate() {
                mean[k / spatial] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for zi in &z {
            for (k, v) in zi.data().iter().enumerate() {
                var[k / spatial] += (v - mean[k / spatial]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let mean = Tensor::new(vec![c], mean)?;
        let var = Tensor::new(vec![c], var)?;
        let inv_std = var.map(|v| 1.0 / (v + FrozenNorm::EPS).sqrt());
        let f = params.norm_scale[j - 1].mul(&inv_std)?;
        let lam = params.lambdas[j - 1].add(&f.mul(&mean)?)?;
        let ws = exec.try_map(0..xs.len(), |i| {
            let mut e = Eager::new();
            let scaled = e.scale_axis(&z[i], &f, 0)?;
            e.threshold(&scaled, &lam)
        })?;
        for (cs, w) in codes.iter_mut().zip(ws) {
            cs.push(w);
        }
        norm.mean.push(mean);
        norm.inv_std.push(inv_std);
        variances.push(var);
    }
    Ok((norm, variances))
}

/// Summed loss, correct count and parameter gradients (in
/// [`ModelParams::named`] order) over a set of samples.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grads: Vec<Tensor>,
}

pub fn batch_gradient(engine: &Engine, xs: &[Tensor], labels: &[usize], pursuit: &PursuitConfig, exec: Exec) -> Result<BatchGradient> {
    let per_sample = exec.try_map(0..xs.len(), |i| {
        let mut g = Graph::new();
        let bd = engine.bind(&mut g, true)?;
        let x = g.constant(xs[i].clone());
        let state = engine.run(&mut g, &bd, &x, pursuit)?;
        let logits = engine.logits(&mut g, &bd, state.output())?;
        let pred = argmax(g.value(logits).data());
        let loss = g.cross_entropy(logits, labels[i])?;
        let grads = g.backward(loss)?;
        let per_param: Vec<Tensor> = bd
            .raw
            .iter()
            .map(|&id| grads.get_or_zeros(id, g.value(id).shape()))
            .collect();
        Ok((g.value(loss).data()[0], pred == labels[i], per_param))
    })?;
    let mut out = BatchGradient {
        loss: 0.0,
        correct: 0,
        count: xs.len(),
        grads: Vec::new(),
    };
    for (loss, ok, grads) in per_sample {
        out.loss += loss;
        out.correct += ok as usize;
        if out.grads.is_empty() {
            out.grads = grads;
        } else {
            for (acc, g) in out.grads.iter_mut().zip(&grads) {
                acc.axpy(1.0, g)?;
            }
        }
    }
    Ok(out)
}

/// Momentum SGD state.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.named().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One step with learning rate `lr`, followed by projection onto the
    /// constraint sets. Non-finite gradients reject the whole step and leave
    /// the parameters untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}; step rejected")));
        }
        for (((role, p), g), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            if !role.trainable() {
                continue;
            }
            let mut d = g.clone();
            if role.decayed() && self.weight_decay != 0.0 {
                d.axpy(self.weight_decay, p)?;
            }
            *v = v.scale(self.momentum);
            v.axpy(1.0, &d)?;
            p.axpy(-lr, v)?;
        }
        params.project();
        Ok(())
    }
}

pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], state: &mut Sgd, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    /// Set on the epoch where training accuracy first changed by less
    /// than 0.1% over the previous 3 epochs.
    pub converged: bool,
    pub rejected_steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<EpochRecord>,
    pub converged_epoch: Option<usize>,
    pub incidents: Vec<String>,
}

/// Training accuracy change below this over [`CONVERGENCE_WINDOW`] epochs
/// marks convergence.
pub const CONVERGENCE_TOL: f64 = 1e-3;
pub const CONVERGENCE_WINDOW: usize = 3;

pub fn train(
    train_set: &Dataset,
    validation: Option<&Dataset>,
    spec: &NetworkSpec,
    config: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams),
) -> Result<TrainOutcome> {
    config.validate()?;
    config.pursuit.validate(spec.depth())?;
    train_set.check_against(spec)?;
    if let Some(v) = validation {
        v.check_against(spec)?;
    }
    let mut params = init_model(spec, config.seed)?;
    let mut sgd = Sgd::new(&params, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut converged_epoch = None;
    let mut incidents = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let (mut loss, mut correct, mut rejected) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<Tensor> = chunk.iter().map(|&i| train_set.image(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (norm, batch_var) = match config.normalization {
                Normalization::Pure => (None, None),
                Normalization::Bn => {
                    let (n, v) = batch_norm_stats(spec, &params, &xs, exec)?;
                    (Some(n), Some(v))
                }
            };
            let engine = Engine::new(spec, &params, norm.clone())?;
            let mut bg = batch_gradient(&engine, &xs, &labels, &config.pursuit, exec)?;
            loss += bg.loss;
            correct += bg.correct;
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut bg.grads {
                *g = g.scale(scale);
            }
            match sgd.step(&mut params, &bg.grads, lr) {
                Ok(()) => {}
                Err(Error::Numeric(msg)) => {
                    rejected += 1;
                    incidents.push(format!("epoch {epoch}: {msg}"));
                    continue;
                }
                Err(e) => return Err(e),
            }
            if let (Some(n), Some(v)) = (norm, batch_var) {
                let m = config.bn_momentum;
                for j in 0..spec.depth() {
                    let rm = params.running_mean[j].scale(1.0 - m).add(&n.mean[j].scale(m))?;
                    let rv = params.running_var[j].scale(1.0 - m).add(&v[j].scale(m))?;
                    params.running_mean[j] = rm;
                    params.running_var[j] = rv;
                }
            }
        }
        let n = train_set.len() as f64;
        let train_acc = correct as f64 / n;
        let val_acc = match validation {
            Some(v) => Some(adversarial::accuracy(v, &params, spec, &config.pursuit, config.normalization, exec)?),
            None => None,
        };
        let adv_acc = match (validation, config.eval_epsilon) {
            (Some(v), Some(eps)) => Some(adversarial::robust_accuracy(
                v,
                &params,
                spec,
                &config.pursuit,
                config.normalization,
                &AttackConfig::fgsm(eps),
                exec,
            )?),
            _ => None,
        };
        let converged = converged_epoch.is_none()
            && epoch >= CONVERGENCE_WINDOW
            && (train_acc - records[epoch - CONVERGENCE_WINDOW].train_acc).abs() < CONVERGENCE_TOL;
        if converged {
            converged_epoch = Some(epoch);
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss / n,
            train_acc,
            val_acc,
            adv_acc,
            converged,
            rejected_steps: rejected,
        };
        on_epoch(&record, &params);
        records.push(record);
    }
    Ok(TrainOutcome {
        params,
        records,
        converged_epoch,
        incidents,
    })
}

/// Whether a parameter receives weight decay.
pub fn is_decayed(role: ParamRole) -> bool {
    role.decayed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pursuit::PursuitMode;

    fn small() -> (NetworkSpec, ModelParams) {
        let spec = NetworkSpec::dense(&[4, 3], 3);
        let p = init_model(&spec, 2).unwrap();
        (spec, p)
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let (spec, mut p) = small();
        p.classifier = Tensor::zeros(&[3, 3]);
        let x = Tensor::vector(vec![0.1, 0.5, 0.9, 0.2]).unwrap();
        let y = forward_logits(&x, &p, &spec, &PursuitConfig::new(PursuitMode::Dp, 3), Normalization::Pure).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_margins_decrease() {
        let mut prev = f64::INFINITY;
        for m in [5.0, 10.0, 20.0] {
            let l = loss_cross_entropy(&Tensor::vector(vec![m, 0.0, 0.0]).unwrap(), 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-8);
        assert!(loss_cross_entropy(&Tensor::vector(vec![0.0; 3]).unwrap(), 3).is_err());
    }

    #[test]
    fn zero_step_changes_nothing() {
        let (_, p) = small();
        let mut q = p.clone();
        let mut sgd = Sgd::new(&q, 0.9, 0.0);
        let grads: Vec<Tensor> = q.named().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        sgd.step(&mut q, &grads, 0.1).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn lambda_is_projected() {
        let (_, p) = small();
        let mut q = p.clone();
        let mut sgd = Sgd::new(&q, 0.0, 0.0);
        let mut grads: Vec<Tensor> = q.named().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let idx = q.named().iter().position(|(n, _, _)| n == "lambda.1").unwrap();
        grads[idx] = Tensor::full(&[3], 10.0);
        sgd.step(&mut q, &grads, 1.0).unwrap();
        assert!(q.lambdas[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (_, p) = small();
        let mut q = p.clone();
        let mut sgd = Sgd::new(&q, 0.9, 0.0);
        let mut grads: Vec<Tensor> = q.named().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        grads[0] = Tensor::from_parts(grads[0].shape().to_vec(), vec![f64::NAN; grads[0].len()]);
        assert!(matches!(sgd.step(&mut q, &grads, 0.1), Err(Error::Numeric(_))));
        assert_eq!(p, q);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // minimize ½ a θ² by plain gradient descent through the optimizer
        let (_, p) = small();
        let mut q = p.clone();
        let mut sgd = Sgd::new(&q, 0.0, 0.0);
        let a = 3.0;
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let theta = q.classifier.clone();
            let loss = 0.5 * a * theta.norm().powi(2);
            assert!(loss <= prev);
            prev = loss;
            let mut grads: Vec<Tensor> = q.named().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
            *grads.last_mut().unwrap() = theta.scale(a);
            sgd.step(&mut q, &grads, 0.5 / a).unwrap();
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cosine_schedule() {
        let c = TrainConfig {
            epochs: 10,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(0), 0.1);
        assert!((c.learning_rate_at(5) - 0.05).abs() < 1e-15);
    }
}
