//! FGSM attacks under an ℓ∞ budget and robust-accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Fingerprint, Graph};
use crate::backend::{Backend, Eager};
use crate::data::Dataset;
use crate::dictionary::NetworkSpec;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::parallel::Exec;
use crate::pursuit::{Engine, PursuitConfig};
use crate::tensor::Tensor;
use crate::training::{argmax, eval_norm, Normalization};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ radius in pixel units.
    pub epsilon: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            lower: 0.0,
            upper: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("attack radius must be ≥ 0, got {}", self.epsilon)));
        }
        if !(self.lower < self.upper) {
            return Err(Error::InvalidArgument("pixel bounds are empty".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + ε·sign(g))`, nudged by an ulp where rounding would leave the
/// ε-ball.
pub fn sign_step(x: &Tensor, grad: &Tensor, attack: &AttackConfig) -> Result<Tensor> {
    attack.validate()?;
    if x.shape() != grad.shape() {
        return Err(Error::Shape(format!("input {:?} vs gradient {:?}", x.shape(), grad.shape())));
    }
    let eps = attack.epsilon;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| {
            let mut y = (xi + eps * sign(gi)).clamp(attack.lower, attack.upper);
            while (y - xi).abs() > eps {
                y = if y > xi { y.next_down() } else { y.next_up() };
            }
            y
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Loss gradient with respect to the input through the full unrolled
/// pursuit, with the logits and the fingerprint of the computation that
/// produced them.
pub fn input_gradient(engine: &Engine, x: &Tensor, label: usize, pursuit: &PursuitConfig) -> Result<(Tensor, Tensor, Fingerprint)> {
    let mut g = Graph::new();
    let bd = engine.bind(&mut g, false)?;
    let xn = g.leaf(x.clone());
    let state = engine.run(&mut g, &bd, &xn, pursuit)?;
    let logits = engine.logits(&mut g, &bd, state.output())?;
    let fp = g.fingerprint();
    let loss = g.cross_entropy(logits, label)?;
    let grad = g.backward(loss)?.get_or_zeros(xn, x.shape());
    Ok((grad, g.value(logits).clone(), fp))
}

/// Eager logits and their fingerprint.
pub fn evaluate(engine: &Engine, x: &Tensor, pursuit: &PursuitConfig) -> Result<(Tensor, Fingerprint)> {
    let mut e = Eager::new();
    let bd = engine.bind(&mut e, false)?;
    let state = engine.run(&mut e, &bd, x, pursuit)?;
    let logits = engine.logits(&mut e, &bd, state.output())?;
    Ok((logits, e.fingerprint()))
}

pub struct AttackOutcome {
    pub x_adv: Tensor,
    /// Prediction on the attacked input.
    pub prediction: usize,
}

/// Attacks one input and classifies the result, checking that the attack
/// differentiated the very computation used for evaluation.
pub fn attack_one(engine: &Engine, x: &Tensor, label: usize, pursuit: &PursuitConfig, attack: &AttackConfig) -> Result<AttackOutcome> {
    attack.validate()?;
    if attack.epsilon == 0.0 {
        let (logits, _) = evaluate(engine, x, pursuit)?;
        return Ok(AttackOutcome {
            x_adv: x.clone(),
            prediction: argmax(logits.data()),
        });
    }
    let (grad, _, attack_fp) = input_gradient(engine, x, label, pursuit)?;
    let x_adv = sign_step(x, &grad, attack)?;
    let (logits, eval_fp) = evaluate(engine, &x_adv, pursuit)?;
    if attack_fp != eval_fp {
        return Err(Error::InvalidArgument(format!(
            "attack graph {:016x} differs from evaluation graph {:016x}",
            attack_fp.value(),
            eval_fp.value()
        )));
    }
    Ok(AttackOutcome {
        x_adv,
        prediction: argmax(logits.data()),
    })
}

pub fn fgsm(
    x: &Tensor,
    label: usize,
    params: &ModelParams,
    spec: &NetworkSpec,
    pursuit: &PursuitConfig,
    normalization: Normalization,
    attack: &AttackConfig,
) -> Result<Tensor> {
    let engine = Engine::new(spec, params, eval_norm(params, normalization))?;
    Ok(attack_one(&engine, x, label, pursuit, attack)?.x_adv)
}

pub fn accuracy(
    data: &Dataset,
    params: &ModelParams,
    spec: &NetworkSpec,
    pursuit: &PursuitConfig,
    normalization: Normalization,
    exec: Exec,
) -> Result<f64> {
    robust_accuracy(data, params, spec, pursuit, normalization, &AttackConfig::fgsm(0.0), exec)
}

/// Fraction of samples still classified correctly after the attack; the
/// clean accuracy when `ε = 0`.
pub fn robust_accuracy(
    data: &Dataset,
    params: &ModelParams,
    spec: &NetworkSpec,
    pursuit: &PursuitConfig,
    normalization: Normalization,
    attack: &AttackConfig,
    exec: Exec,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let engine = Engine::new(spec, params, eval_norm(params, normalization))?;
    robust_accuracy_with(&engine, data, pursuit, attack, exec)
}

pub fn robust_accuracy_with(engine: &Engine, data: &Dataset, pursuit: &PursuitConfig, attack: &AttackConfig, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let hits = exec.try_map(0..data.len(), |i| {
        let out = attack_one(engine, &data.image(i), data.labels[i], pursuit, attack)?;
        Ok(out.prediction == data.labels[i])
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub robust_acc: f64,
}

/// Robust accuracy at each radius; radii must be non-negative and sorted.
pub fn epsilon_sweep(
    data: &Dataset,
    params: &ModelParams,
    spec: &NetworkSpec,
    pursuit: &PursuitConfig,
    normalization: Normalization,
    epsilons: &[f64],
    exec: Exec,
) -> Result<Vec<SweepPoint>> {
    if epsilons.iter().any(|e| !(*e >= 0.0)) || epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(format!("radii must be non-negative and sorted: {epsilons:?}")));
    }
    let engine = Engine::new(spec, params, eval_norm(params, normalization))?;
    epsilons
        .iter()
        .map(|&eps| {
            Ok(SweepPoint {
                epsilon: eps,
                robust_acc: robust_accuracy_with(&engine, data, pursuit, &AttackConfig::fgsm(eps), exec)?,
            })
        })
        .collect()
}

/// Consecutive radius pairs where accuracy went up. FGSM is not a worst
/// case attack, so these are reported rather than treated as errors.
pub fn monotonicity_violations(points: &[SweepPoint]) -> Vec<(f64, f64)> {
    points
        .windows(2)
        .filter(|w| w[1].robust_acc > w[0].robust_acc)
        .map(|w| (w[0].epsilon, w[1].epsilon))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_step_example() {
        let x = Tensor::vector(vec![0.5, 0.5, 0.5]).unwrap();
        let g = Tensor::vector(vec![0.2, -0.1, 0.0]).unwrap();
        let y = sign_step(&x, &g, &AttackConfig::fgsm(0.03)).unwrap();
        let d: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        assert!((d[0] - 0.03).abs() < 1e-15 && (d[1] + 0.03).abs() < 1e-15 && d[2] == 0.0);
    }

    #[test]
    fn clipping_and_budget() {
        let x = Tensor::vector(vec![0.99, 0.01, 0.1 + 0.2]).unwrap();
        let g = Tensor::vector(vec![1.0, -1.0, 1.0]).unwrap();
        let attack = AttackConfig::fgsm(0.1);
        let y = sign_step(&x, &g, &attack).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 0.1);
        }
        assert!(sign_step(&x, &g, &AttackConfig::fgsm(-0.1)).is_err());
    }

    #[test]
    fn zero_radius_is_identity() {
        let x = Tensor::vector(vec![0.3, 0.7]).unwrap();
        let g = Tensor::vector(vec![1.0, -1.0]).unwrap();
        assert_eq!(sign_step(&x, &g, &AttackConfig::fgsm(0.0)).unwrap(), x);
    }
}
