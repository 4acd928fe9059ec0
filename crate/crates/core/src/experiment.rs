//! End-to-end runs: train every (seed, mode, T) cell of a configuration,
//! attack it, measure its dictionaries and record everything on disk.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::adversarial::{epsilon_sweep, monotonicity_violations, SweepPoint};
use crate::backend::Eager;
use crate::checkpoint;
use crate::config::{
    AttackSection, DataSource, ExperimentConfig, NetworkConfig, NetworkKind, OutputSection, PursuitSection, TrainSection,
};
use crate::data::{self, Dataset, Provenance, Split, SynthConfig};
use crate::dictionary::{assemble_global_dictionary, column_metrics, welch_bound, NetworkSpec};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::parallel::Exec;
use crate::pursuit::{Engine, PursuitConfig, PursuitMode};
use crate::report::{self, EpochRow, RunRecord, Series, TraceRow};
use crate::training::{eval_norm, train, Normalization, TrainConfig};

/// One trained model of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub seed: u64,
    pub mode: PursuitMode,
    pub iterations: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}-T{}-seed{}", self.mode, self.iterations, self.seed)
    }
}

/// L-TP ignores `T`, so it runs once at `T = 0`; the other modes run at
/// every positive `T` (or at `0` when none is listed).
pub fn grid(cfg: &ExperimentConfig) -> Vec<Cell> {
    let positive: Vec<usize> = cfg.pursuit.iterations.iter().copied().filter(|&t| t > 0).collect();
    let mut cells = Vec::new();
    for &seed in &cfg.train.seeds {
        for &mode in &cfg.pursuit.modes {
            let ts = if mode == PursuitMode::Ltp || positive.is_empty() {
                vec![0]
            } else {
                positive.clone()
            };
            for iterations in ts {
                let cell = Cell { seed, mode, iterations };
                if !cells.contains(&cell) {
                    cells.push(cell);
                }
            }
        }
    }
    cells
}

fn image_shape(network: &NetworkConfig) -> Result<[usize; 3]> {
    match network.input.as_slice() {
        &[c, h, w] => Ok([c, h, w]),
        &[n] => Ok([1, 1, n]),
        other => Err(Error::Config(format!("input shape {other:?} is neither [n] nor [c, h, w]"))),
    }
}

/// Training and test sets for `cfg`: CIFAR-10 when requested or found,
/// else the synthetic generator at the network's input shape.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let t = &cfg.train;
    let shape = image_shape(&cfg.network)?;
    let dir = data::resolve_data_dir(t.data_dir.as_deref());
    let use_cifar = match t.dataset {
        DataSource::Synthetic => false,
        DataSource::Cifar10 => {
            let dir = dir.as_ref().map_err(|e| Error::Data(e.to_string()))?;
            if !data::cifar_available(dir) {
                return Err(Error::Data(format!("CIFAR-10 binary files not found in {}", dir.display())));
            }
            true
        }
        DataSource::Auto => dir.as_ref().map(|d| data::cifar_available(d)).unwrap_or(false),
    };
    let (train, test) = if use_cifar {
        let dir = dir?;
        let (train, test) = data::load_cifar10(&dir)?;
        let train = data::downsample(&train.take(t.train_samples), t.downsample)?;
        let test = data::downsample(&test.take(t.test_samples), t.downsample)?;
        if cfg.network.classes != 10 {
            return Err(Error::Config(format!("CIFAR-10 has 10 classes, network has {}", cfg.network.classes)));
        }
        (train, test)
    } else {
        let synth = SynthConfig::new(cfg.network.classes, shape, t.data_seed);
        (synth.generate(t.train_samples, Split::Train)?, synth.generate(t.test_samples, Split::Test)?)
    };
    let spec = cfg.network.chain_spec()?;
    train.check_against(&spec)?;
    test.check_against(&spec)?;
    Ok((train, test))
}

pub fn train_config(cfg: &ExperimentConfig, cell: &Cell) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        schedule: t.schedule,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        seed: cell.seed,
        pursuit: pursuit_config(cfg, cell.mode, cell.iterations),
        normalization: t.normalization,
        bn_momentum: 0.1,
        eval_epsilon: (t.eval_epsilon > 0.0).then_some(t.eval_epsilon),
    }
}

pub fn pursuit_config(cfg: &ExperimentConfig, mode: PursuitMode, iterations: usize) -> PursuitConfig {
    let p = PursuitConfig::new(mode, iterations);
    if cfg.pursuit.alpha > 0.0 {
        p.with_alpha(cfg.pursuit.alpha)
    } else {
        p
    }
}

/// Coherence, frame potential and Welch bound of the effective global
/// dictionary, or `None` when it is too large to materialize.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DictionaryMetrics {
    pub coherence: f64,
    pub frame_potential: f64,
    pub welch_bound: f64,
    pub rows: usize,
    pub cols: usize,
}

pub fn dictionary_metrics(
    spec: &NetworkSpec,
    params: &ModelParams,
    normalization: Normalization,
    exec: Exec,
) -> Result<Option<DictionaryMetrics>> {
    let engine = Engine::new(spec, params, eval_norm(params, normalization))?;
    let eff = engine.effective_params()?;
    let global = match assemble_global_dictionary(&eff, spec) {
        Ok(g) => g,
        Err(Error::TooLarge { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let m = column_metrics(&global.matrix, exec)?;
    Ok(Some(DictionaryMetrics {
        coherence: m.coherence,
        frame_potential: m.frame_potential,
        welch_bound: welch_bound(global.rows(), global.cols())?,
        rows: global.rows(),
        cols: global.cols(),
    }))
}

/// Residuals and objective averaged over inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanTrace {
    /// `objective[t]`.
    pub objective: Vec<f64>,
    /// `residuals[j-1][t]`.
    pub residuals: Vec<Vec<f64>>,
}

pub fn mean_trace(engine: &Engine, xs: &[crate::tensor::Tensor], pursuit: &PursuitConfig, exec: Exec) -> Result<MeanTrace> {
    if xs.is_empty() {
        return Err(Error::Data("traces need at least one input".into()));
    }
    let config = pursuit.clone().traced();
    let traces = exec.try_map(0..xs.len(), |i| {
        let mut e = Eager::new();
        let bd = engine.bind(&mut e, false)?;
        let state = engine.run(&mut e, &bd, &xs[i], &config)?;
        state.trace.ok_or(Error::TraceDisabled)
    })?;
    let n = xs.len() as f64;
    let mut objective = vec![0.0; traces[0].objective.len()];
    let mut residuals: Vec<Vec<f64>> = traces[0].residuals.iter().map(|r| vec![0.0; r.len()]).collect();
    for tr in &traces {
        for (acc, v) in objective.iter_mut().zip(&tr.objective) {
            *acc += v / n;
        }
        for (acc, r) in residuals.iter_mut().zip(&tr.residuals) {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v / n;
            }
        }
    }
    Ok(MeanTrace { objective, residuals })
}

/// Everything recorded for one cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub spec: NetworkSpec,
    pub params: ModelParams,
    pub records: Vec<RunRecord>,
    pub epochs: Vec<EpochRow>,
    pub traces: Vec<TraceRow>,
    pub sweep: Vec<SweepPoint>,
    pub incidents: Vec<String>,
    pub converged_epoch: Option<usize>,
}

/// Trains one cell and, with `evaluate`, runs the radius sweep, metrics
/// and traces on the test set.
pub fn run_cell(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    cell: Cell,
    evaluate: bool,
    exec: Exec,
    log: &mut dyn FnMut(&str),
) -> Result<CellResult> {
    let start = Instant::now();
    let hash = cfg.short_hash();
    let spec = cfg.network.spec_for(cell.mode)?;
    let tc = train_config(cfg, &cell);
    tc.pursuit.validate(spec.depth())?;
    if cell.mode == PursuitMode::Lbp && !spec.skips.is_empty() {
        return Err(Error::Topology(
            "layered basis pursuit only supports chain networks; drop the skips or pick another mode".into(),
        ));
    }
    let mut epochs = Vec::new();
    let outcome = train(train_set, Some(test_set), &spec, &tc, exec, |r, _| {
        log(&format!(
            "  {} epoch {:>3}  loss {:.4}  train {:.3}  test {}  adv {}",
            cell.label(),
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            r.adv_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
        ));
        epochs.push(EpochRow {
            config_hash: hash.clone(),
            seed: cell.seed,
            mode: cell.mode,
            iterations: cell.iterations,
            epoch: r.epoch,
            learning_rate: r.learning_rate,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            clean_acc: r.val_acc,
            adv_acc: r.adv_acc,
            converged: r.converged,
        });
    })?;
    let params = outcome.params;
    let mut result = CellResult {
        cell,
        spec: spec.clone(),
        params: params.clone(),
        records: Vec::new(),
        epochs,
        traces: Vec::new(),
        sweep: Vec::new(),
        incidents: outcome.incidents,
        converged_epoch: outcome.converged_epoch,
    };
    if !evaluate {
        return Ok(result);
    }
    let norm = cfg.train.normalization;
    let sweep = epsilon_sweep(test_set, &params, &spec, &tc.pursuit, norm, &cfg.attack.sweep(), exec)?;
    for (a, b) in monotonicity_violations(&sweep) {
        log(&format!("  {}: robust accuracy rose between ε = {a:.5} and ε = {b:.5}", cell.label()));
    }
    let clean_acc = match sweep.iter().find(|p| p.epsilon == 0.0) {
        Some(p) => p.robust_acc,
        None => crate::adversarial::accuracy(test_set, &params, &spec, &tc.pursuit, norm, exec)?,
    };
    let metrics = dictionary_metrics(&spec, &params, norm, exec)?;
    let engine = Engine::new(&spec, &params, eval_norm(&params, norm))?;
    let n_trace = cfg.output.trace_samples.clamp(1, test_set.len());
    let xs: Vec<_> = (0..n_trace).map(|i| test_set.image(i)).collect();
    let trace = mean_trace(&engine, &xs, &tc.pursuit, exec)?;
    for (j, r) in trace.residuals.iter().enumerate() {
        for (t, &v) in r.iter().enumerate() {
            result.traces.push(TraceRow {
                config_hash: hash.clone(),
                seed: cell.seed,
                mode: cell.mode,
                iterations: cell.iterations,
                layer: j + 1,
                iteration: t,
                residual: v,
                objective: trace.objective[t],
            });
        }
    }
    let wall_s = start.elapsed().as_secs_f64();
    let final_epoch = cfg.train.epochs.saturating_sub(1);
    let objective = *trace.objective.last().expect("trace has an initial entry");
    for p in &sweep {
        result.records.push(RunRecord {
            config_hash: hash.clone(),
            seed: cell.seed,
            mode: cell.mode,
            iterations: cell.iterations,
            epsilon: p.epsilon,
            epoch: final_epoch,
            clean_acc,
            robust_acc: p.robust_acc,
            objective,
            coherence: metrics.map(|m| m.coherence),
            frame_potential: metrics.map(|m| m.frame_potential),
            welch_bound: metrics.map(|m| m.welch_bound),
            wall_s,
        });
    }
    result.sweep = sweep;
    Ok(result)
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOptions {
    /// Run the sweep, metrics and traces after training.
    pub evaluate: bool,
    /// Overrides `[output] dir` and disables the timestamped subdirectory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub provenance: Provenance,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_class_counts: Vec<usize>,
    pub cells: usize,
    pub failures: Vec<String>,
    pub incidents: Vec<String>,
    pub converged_epochs: Vec<(String, Option<usize>)>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub epochs: Vec<EpochRow>,
    pub traces: Vec<TraceRow>,
    pub summary: Summary,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn output_dir(output: &OutputSection, hash: &str, over: Option<&Path>) -> Result<PathBuf> {
    let dir = match over {
        Some(d) => d.to_path_buf(),
        None if output.timestamped => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            output.dir.join(format!("run-{secs}-{}", &hash[..8]))
        }
        None => output.dir.clone(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Runs the whole grid. A cell that fails with a topology error (L-BP on
/// a network with skips) is recorded and skipped; any other error aborts
/// the run after the CSVs written so far are flushed.
pub fn run_experiment(cfg: &ExperimentConfig, options: &ExperimentOptions, exec: Exec, log: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let hash = cfg.short_hash();
    let dir = output_dir(&cfg.output, &hash, options.out_dir.as_deref())?;
    write(&dir.join("config.toml"), &cfg.resolved())?;
    let (train_set, test_set) = load_data(cfg)?;
    log(&format!(
        "data: {} ({} train, {} test), config {hash}, output {}",
        train_set.provenance,
        train_set.len(),
        test_set.len(),
        dir.display()
    ));
    let cells = grid(cfg);
    let mut out = ExperimentOutcome {
        dir: dir.clone(),
        records: Vec::new(),
        epochs: Vec::new(),
        traces: Vec::new(),
        summary: Summary {
            config_hash: cfg.hash(),
            provenance: train_set.provenance,
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            train_class_counts: train_set.class_counts(),
            cells: cells.len(),
            failures: Vec::new(),
            incidents: Vec::new(),
            converged_epochs: Vec::new(),
        },
    };
    if cfg.output.checkpoints {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    for (k, cell) in cells.iter().enumerate() {
        log(&format!("[{}/{}] {}", k + 1, cells.len(), cell.label()));
        let res = run_cell(cfg, &train_set, &test_set, *cell, options.evaluate, exec, log);
        let res = match res {
            Ok(r) => r,
            Err(Error::Topology(msg)) => {
                log(&format!("  skipped: {msg}"));
                out.summary.failures.push(format!("{}: {msg}", cell.label()));
                continue;
            }
            Err(e) => {
                flush(&out, cfg)?;
                return Err(e);
            }
        };
        if cfg.output.checkpoints {
            let path = dir.join("checkpoints").join(format!("{}.ckpt", cell.label()));
            checkpoint::save(&path, &res.params, &res.spec, cell.seed)?;
        }
        out.summary.incidents.extend(res.incidents.iter().map(|i| format!("{}: {i}", cell.label())));
        out.summary.converged_epochs.push((cell.label(), res.converged_epoch));
        out.records.extend(res.records);
        out.epochs.extend(res.epochs);
        out.traces.extend(res.traces);
        flush(&out, cfg)?;
    }
    if cfg.output.svg && options.evaluate {
        write_charts(&out, cfg)?;
    }
    Ok(out)
}

fn flush(out: &ExperimentOutcome, _cfg: &ExperimentConfig) -> Result<()> {
    write(&out.dir.join("results.csv"), &report::results_csv(&out.records))?;
    write(&out.dir.join("epochs.csv"), &report::epochs_csv(&out.epochs))?;
    write(&out.dir.join("traces.csv"), &report::traces_csv(&out.traces))?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(|e| Error::Data(e.to_string()))?;
    write(&out.dir.join("summary.json"), &summary)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Largest `T` each mode was run at.
fn deepest(records: &[(PursuitMode, usize)], mode: PursuitMode) -> Option<usize> {
    records.iter().filter(|(m, _)| *m == mode).map(|&(_, t)| t).max()
}

/// Points averaged over seeds, keyed by `x`.
fn averaged(points: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let mut buckets: Vec<(f64, Vec<f64>)> = Vec::new();
    for (x, y) in points {
        match buckets.iter_mut().find(|(bx, _)| *bx == x) {
            Some((_, ys)) => ys.push(y),
            None => buckets.push((x, vec![y])),
        }
    }
    buckets.sort_by(|a, b| a.0.total_cmp(&b.0));
    buckets.into_iter().map(|(x, ys)| (x, mean(&ys))).collect()
}

fn write_charts(out: &ExperimentOutcome, cfg: &ExperimentConfig) -> Result<()> {
    let modes: Vec<PursuitMode> = PursuitMode::ALL
        .into_iter()
        .filter(|m| out.records.iter().any(|r| r.mode == *m))
        .collect();
    let runs: Vec<(PursuitMode, usize)> = out.records.iter().map(|r| (r.mode, r.iterations)).collect();
    let label = |m: PursuitMode, t: usize| format!("{m} T={t}");

    let mut by_eps = Vec::new();
    let mut by_t = Vec::new();
    let mut by_epoch = Vec::new();
    let mut residual = Vec::new();
    let mut coherence = Vec::new();
    let probe = cfg.train.eval_epsilon;
    for &m in &modes {
        let t = deepest(&runs, m).expect("mode has records");
        by_eps.push(Series {
            label: label(m, t),
            points: averaged(
                out.records
                    .iter()
                    .filter(|r| r.mode == m && r.iterations == t)
                    .map(|r| (r.epsilon * 255.0, r.robust_acc)),
            ),
        });
        by_t.push(Series {
            label: m.to_string(),
            points: averaged(
                out.records
                    .iter()
                    .filter(|r| r.mode == m && (r.epsilon - probe).abs() < 1e-12)
                    .map(|r| (r.iterations as f64, r.robust_acc)),
            ),
        });
        coherence.push(Series {
            label: m.to_string(),
            points: averaged(
                out.records
                    .iter()
                    .filter(|r| r.mode == m && r.coherence.is_some())
                    .map(|r| (r.iterations as f64, r.coherence.unwrap_or(0.0))),
            ),
        });
        by_epoch.push(Series {
            label: label(m, t),
            points: averaged(
                out.epochs
                    .iter()
                    .filter(|r| r.mode == m && r.iterations == t && r.adv_acc.is_some())
                    .map(|r| (r.epoch as f64, r.adv_acc.unwrap_or(0.0))),
            ),
        });
        residual.push(Series {
            label: label(m, t),
            points: averaged(
                out.traces
                    .iter()
                    .filter(|r| r.mode == m && r.iterations == t)
                    .map(|r| (r.iteration as f64, r.residual)),
            ),
        });
    }
    let charts = [
        ("accuracy_vs_epsilon.svg", "Robust accuracy under FGSM", "ε × 255", "accuracy", by_eps),
        ("accuracy_vs_iterations.svg", "Robust accuracy at the probe radius", "iterations T", "accuracy", by_t),
        ("adv_accuracy_vs_epoch.svg", "Robust accuracy during training", "epoch", "accuracy", by_epoch),
        ("residual_vs_iteration.svg", "Mean layer residual", "iteration", "‖t_j − B_j w_j‖", residual),
        ("coherence_vs_iterations.svg", "Global dictionary coherence", "iterations T", "coherence", coherence),
    ];
    for (name, title, x, y, series) in charts {
        write(&out.dir.join(name), &report::line_chart(title, x, y, &series))?;
    }
    Ok(())
}

/// A few seconds of everything: one dense layer, 200 synthetic training
/// samples, every mode at `T = 2`.
pub fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        network: NetworkConfig {
            kind: NetworkKind::Dense,
            input: vec![3, 4, 4],
            width: 4,
            depth: 1,
            dims: vec![16],
            classes: 3,
            residual: false,
        },
        pursuit: PursuitSection {
            modes: PursuitMode::ALL.to_vec(),
            iterations: vec![2],
            alpha: 0.0,
        },
        train: TrainSection {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            schedule: crate::training::Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            normalization: Normalization::Bn,
            seeds: vec![0],
            dataset: DataSource::Synthetic,
            data_dir: None,
            downsample: 1,
            train_samples: 200,
            test_samples: 100,
            data_seed: 7,
            eval_epsilon: 2.0 / 255.0,
        },
        attack: AttackSection {
            epsilons: vec![2.0 / 255.0, 8.0 / 255.0],
            include_clean: true,
        },
        output: OutputSection {
            dir: PathBuf::from("runs"),
            timestamped: false,
            checkpoints: true,
            svg: true,
            trace_samples: 8,
        },
    }
}

/// The downscaled CIFAR-style setting: three blocks of width 4 on 8×8
/// inputs, every mode, three seeds.
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_str("[network]\n[pursuit]\n[train]\n").expect("defaults parse")
}
