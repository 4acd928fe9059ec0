use deep_pursuit::data::{Dataset, Provenance, Split};
use deep_pursuit::training::{train, Normalization, Schedule, TrainConfig};
use deep_pursuit::{init_model, Exec, NetworkSpec, PursuitConfig, PursuitMode, Tensor};

/// Two classes split by the sign of `x₀ − x₁` with a margin.
fn separable(n: usize) -> Dataset {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let t = (i as f64 * 0.618_033_988_7).fract();
        let label = i % 2;
        let (a, b) = if label == 0 { (0.8, 0.2 * t) } else { (0.2 * t, 0.8) };
        pixels.extend([a, b, 0.5, t]);
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 4, 1, 1], pixels).unwrap(), labels, 2, Provenance::Synthetic, Split::Train).unwrap()
}

#[test]
fn separable_data_is_fit_in_every_mode() {
    let spec = NetworkSpec::dense(&[4, 8], 2);
    let data = separable(64);
    for mode in [PursuitMode::Ltp, PursuitMode::Lbp, PursuitMode::Dp] {
        let t = if mode == PursuitMode::Ltp { 0 } else { 3 };
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.1,
            pursuit: PursuitConfig::new(mode, t),
            ..TrainConfig::default()
        };
        let out = train(&data, Some(&data), &spec, &cfg, Exec::default(), |_, _| {}).unwrap();
        let best = out.records.iter().map(|r| r.train_acc).fold(0.0, f64::max);
        assert!(best >= 0.99, "{mode}: best training accuracy {best}");
        assert!(out.incidents.is_empty());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let spec = NetworkSpec::dense(&[4, 6, 5], 2);
    let data = separable(20);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.0,
        schedule: Schedule::Constant,
        seed: 9,
        pursuit: PursuitConfig::new(PursuitMode::Dp, 2),
        ..TrainConfig::default()
    };
    let out = train(&data, None, &spec, &cfg, Exec::default(), |_, _| {}).unwrap();
    assert_eq!(out.params, init_model(&spec, 9).unwrap());
}

#[test]
fn sequential_and_parallel_training_agree() {
    let spec = NetworkSpec::dense(&[4, 6], 2);
    let data = separable(24);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 6,
        normalization: Normalization::Bn,
        pursuit: PursuitConfig::new(PursuitMode::Dp, 2),
        ..TrainConfig::default()
    };
    let a = train(&data, None, &spec, &cfg, Exec::Sequential, |_, _| {}).unwrap();
    let b = train(&data, None, &spec, &cfg, Exec::default(), |_, _| {}).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn bad_settings_are_config_errors() {
    let spec = NetworkSpec::dense(&[4, 6], 2);
    let data = separable(8);
    let cfg = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    let err = train(&data, None, &spec, &cfg, Exec::default(), |_, _| {}).unwrap_err();
    assert!(matches!(err, deep_pursuit::Error::Config(_)));
    let wide = NetworkSpec::dense(&[5, 6], 2);
    let err = train(&data, None, &wide, &TrainConfig::default(), Exec::default(), |_, _| {}).unwrap_err();
    assert!(matches!(err, deep_pursuit::Error::Data(_)));
}
