#![allow(dead_code)]

use deep_pursuit::autodiff::Graph;
use deep_pursuit::data::{synth_dataset, Dataset, Split, SynthConfig};
use deep_pursuit::dictionary::Lipschitz;
use deep_pursuit::model::ModelParams;
use deep_pursuit::pursuit::Engine;
use deep_pursuit::training::{batch_gradient, train, Normalization, TrainConfig};
use deep_pursuit::{init_model, Exec, NetworkSpec, PursuitConfig, SkipKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Dense chain with `1..=3` layers and widths `2..=16`. With `skips` and
/// three layers, a skip from code 1 into layer 3 is added (identity when
/// the widths allow it).
pub fn random_dense(rng: &mut ChaCha8Rng, skips: bool) -> NetworkSpec {
    let depth = if skips { 3 } else { rng.random_range(1..=3) };
    let mut dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=16)).collect();
    let identity = skips && rng.random_bool(0.5);
    if identity {
        dims[2] = dims[1];
    }
    let spec = NetworkSpec::dense(&dims, rng.random_range(2..=4));
    if skips {
        let kind = if identity { SkipKind::Identity } else { SkipKind::LearnedDense };
        spec.with_skip(1, 3, kind).unwrap()
    } else {
        spec
    }
}

/// Initialized parameters with thresholds drawn from `[0, 0.2)`.
pub fn random_params(rng: &mut ChaCha8Rng, spec: &NetworkSpec) -> ModelParams {
    let mut p = init_model(spec, rng.random()).unwrap();
    for l in &mut p.lambdas {
        let n = l.len();
        *l = Tensor::vector(uniform(rng, n, 0.0, 0.2)).unwrap();
    }
    for s in p.skips.iter_mut().flatten() {
        let shape = s.shape().to_vec();
        let n = s.len();
        *s = Tensor::new(shape, uniform(rng, n, -0.3, 0.3)).unwrap();
    }
    p
}

pub fn random_input(rng: &mut ChaCha8Rng, spec: &NetworkSpec) -> Tensor {
    let n: usize = spec.input.iter().product();
    Tensor::new(spec.input.clone(), uniform(rng, n, 0.0, 1.0)).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Loss and threshold activation pattern with the step constants pinned.
fn loss_at(spec: &NetworkSpec, p: &ModelParams, lip: &[Lipschitz], x: &Tensor, label: usize, pursuit: &PursuitConfig) -> (f64, Vec<bool>) {
    let engine = Engine::with_lipschitz(spec, p, None, lip).unwrap();
    let mut g = Graph::new();
    let bd = engine.bind(&mut g, false).unwrap();
    let xn = g.constant(x.clone());
    let state = engine.run(&mut g, &bd, &xn, pursuit).unwrap();
    let logits = engine.logits(&mut g, &bd, state.output()).unwrap();
    let loss = g.cross_entropy(logits, label).unwrap();
    (g.value(loss).data()[0], g.threshold_pattern())
}

/// Largest `|analytic − fd| / max(|analytic|, |fd|, floor)` over every
/// trainable coordinate whose probes stay off a kink, and the number checked.
pub fn unrolled_check(spec: &NetworkSpec, p: &ModelParams, x: &Tensor, label: usize, pursuit: &PursuitConfig) -> (f64, usize) {
    let engine = Engine::new(spec, p, None).unwrap();
    let lip = engine.lipschitz().to_vec();
    let grads = batch_gradient(&engine, &[x.clone()], &[label], pursuit, Exec::Sequential).unwrap().grads;
    let (_, base) = loss_at(spec, p, &lip, x, label, pursuit);
    let h = 1e-6;
    let (mut worst, mut checked) = (0.0f64, 0);
    let roles: Vec<_> = p.named().iter().map(|(_, r, _)| *r).collect();
    for (k, role) in roles.iter().enumerate() {
        if !role.trainable() {
            continue;
        }
        for i in 0..grads[k].len() {
            let probe = |d: f64| {
                let mut q = p.clone();
                q.tensors_mut()[k].1.data_mut()[i] += d;
                loss_at(spec, &q, &lip, x, label, pursuit)
            };
            let (fp, pp) = probe(h);
            let (fm, pm) = probe(-h);
            if pp != base || pm != base {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let a = grads[k].data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
            checked += 1;
        }
    }
    (worst, checked)
}

/// One dense layer trained briefly on 3-class synthetic data, with a
/// held-out split.
pub fn trained_shallow() -> (NetworkSpec, ModelParams, Dataset) {
    let spec = NetworkSpec::dense(&[48, 16], 3);
    let train_set = synth_dataset(3, [3, 4, 4], 300, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.05,
        normalization: Normalization::Pure,
        ..TrainConfig::default()
    };
    let out = train(&train_set, None, &spec, &cfg, Exec::default(), |_, _| {}).unwrap();
    let test = SynthConfig::new(3, [3, 4, 4], 5)
        .generate(100, Split::Test)
        .unwrap();
    (spec, out.params, test)
}
