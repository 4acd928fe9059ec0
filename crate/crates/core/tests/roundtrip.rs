mod common;

use common::*;
use deep_pursuit::checkpoint;
use deep_pursuit::data::{parse_records, serialize_cifar, Dataset, Provenance, Split};
use deep_pursuit::experiment::{run_experiment, smoke_config, ExperimentOptions};
use deep_pursuit::{init_model, Exec, NetworkSpec, Tensor};
use proptest::prelude::*;

#[test]
fn checkpoints_are_bit_exact() {
    let mut r = rng(41);
    let dir = tempfile::tempdir().unwrap();
    for k in 0..10 {
        let spec = random_dense(&mut r, k % 2 == 0);
        let p = random_params(&mut r, &spec);
        let path = dir.path().join(format!("{k}.ckpt"));
        checkpoint::save(&path, &p, &spec, k).unwrap();
        let (q, seed) = checkpoint::load(&path, &spec).unwrap();
        assert_eq!(seed, k);
        for ((_, _, a), (_, _, b)) in p.named().iter().zip(q.named()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(checkpoint::encode(&q, &spec, k), std::fs::read(&path).unwrap());
    }
}

#[test]
fn checkpoint_for_another_topology_is_rejected() {
    let a = NetworkSpec::dense(&[4, 3], 2);
    let b = NetworkSpec::dense(&[4, 5], 2);
    let bytes = checkpoint::encode(&init_model(&a, 0).unwrap(), &a, 0);
    assert!(matches!(checkpoint::decode(&bytes, &b), Err(deep_pursuit::Error::Checkpoint(_))));
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3], &a).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn cifar_records_round_trip(labels in prop::collection::vec(0u8..10, 1..4), seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut bytes = Vec::new();
        for &l in &labels {
            bytes.push(l);
            bytes.extend(uniform(&mut r, 3072, 0.0, 256.0).into_iter().map(|v| v as u8));
        }
        let data = parse_records(&bytes, Split::Test).unwrap();
        prop_assert_eq!(data.len(), labels.len());
        prop_assert_eq!(serialize_cifar(&data).unwrap(), bytes);
    }
}

#[test]
fn bad_cifar_bytes_are_data_errors() {
    assert!(matches!(parse_records(&[0; 100], Split::Train), Err(deep_pursuit::Error::Data(_))));
    let mut rec = vec![0u8; 3073];
    rec[0] = 11;
    assert!(matches!(parse_records(&rec, Split::Train), Err(deep_pursuit::Error::Data(_))));
    let small = Dataset::new(Tensor::zeros(&[1, 3, 8, 8]), vec![0], 10, Provenance::Synthetic, Split::Train).unwrap();
    assert!(serialize_cifar(&small).is_err());
}

/// Drops the trailing `wall_s` column.
fn without_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn smoke_runs_are_reproducible() {
    let cfg = smoke_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let execs = [Exec::default(), Exec::Sequential];
    let outs: Vec<_> = dirs
        .iter()
        .zip(execs)
        .map(|(d, exec)| {
            let opts = ExperimentOptions {
                evaluate: true,
                out_dir: Some(d.path().to_path_buf()),
            };
            run_experiment(&cfg, &opts, exec, &mut |_| {}).unwrap()
        })
        .collect();
    let read = |i: usize, f: &str| std::fs::read_to_string(outs[i].dir.join(f)).unwrap();
    assert_eq!(without_wall(&read(0, "results.csv")), without_wall(&read(1, "results.csv")));
    for f in ["epochs.csv", "traces.csv", "config.toml"] {
        assert_eq!(read(0, f), read(1, f), "{f}");
    }
    let rows = read(0, "results.csv").lines().count() - 1;
    assert!(rows >= 5);
    for entry in std::fs::read_dir(outs[0].dir.join("checkpoints")).unwrap() {
        let p = entry.unwrap().path();
        let other = outs[1].dir.join("checkpoints").join(p.file_name().unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(other).unwrap());
    }
}
