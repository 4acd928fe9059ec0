//! Experiment configuration files.
//!
//! Sections `[network]`, `[pursuit]` and `[train]` are required; `[attack]`
//! and `[output]` may be empty or absent. Unknown keys are errors. Radii
//! may be written as numbers or as `"k/255"` strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::dictionary::NetworkSpec;
use crate::error::{Error, Result};
use crate::pursuit::PursuitMode;
use crate::training::{Normalization, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    /// Three blocks of two-convolution units.
    Appendix,
    /// Fully connected chain over the flattened input.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_kind")]
    pub kind: NetworkKind,
    #[serde(default = "default_input")]
    pub input: Vec<usize>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Hidden and output widths of a dense chain.
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Use the residual topology for every mode, not only DP-res.
    #[serde(default)]
    pub residual: bool,
}

fn default_kind() -> NetworkKind {
    NetworkKind::Appendix
}
fn default_input() -> Vec<usize> {
    vec![3, 8, 8]
}
fn default_width() -> usize {
    4
}
fn default_depth() -> usize {
    1
}
fn default_classes() -> usize {
    10
}

impl NetworkConfig {
    /// Chain topology described by the section.
    pub fn chain_spec(&self) -> Result<NetworkSpec> {
        let spec = match self.kind {
            NetworkKind::Appendix => {
                let input: [usize; 3] = self.input.as_slice().try_into().map_err(|_| {
                    Error::Config(format!("appendix networks need a [c, h, w] input, got {:?}", self.input))
                })?;
                NetworkSpec::appendix(input, self.width, self.depth, self.classes)?
            }
            NetworkKind::Dense => {
                if self.dims.is_empty() {
                    return Err(Error::Config("dense networks need at least one entry in dims".into()));
                }
                let mut dims = vec![self.input.iter().product()];
                dims.extend_from_slice(&self.dims);
                NetworkSpec::dense(&dims, self.classes)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Topology a mode runs on.
    pub fn spec_for(&self, mode: PursuitMode) -> Result<NetworkSpec> {
        let chain = self.chain_spec()?;
        if self.residual || mode.uses_residuals() {
            chain.with_unit_residuals()
        } else {
            Ok(chain)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PursuitSection {
    #[serde(default = "default_modes")]
    pub modes: Vec<PursuitMode>,
    #[serde(default = "default_iterations")]
    pub iterations: Vec<usize>,
    #[serde(default)]
    pub alpha: f64,
}

fn default_modes() -> Vec<PursuitMode> {
    PursuitMode::ALL.to_vec()
}
fn default_iterations() -> Vec<usize> {
    vec![0, 2, 5, 10]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// CIFAR-10 when the files are present, synthetic otherwise.
    Auto,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_norm")]
    pub normalization: Normalization,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_source")]
    pub dataset: DataSource,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Seed of the synthetic generator.
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    /// Radius of the per-epoch adversarial accuracy; `0` disables it.
    #[serde(default = "default_eval_eps", deserialize_with = "radius")]
    pub eval_epsilon: f64,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_norm() -> Normalization {
    Normalization::Bn
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_source() -> DataSource {
    DataSource::Auto
}
fn default_downsample() -> usize {
    4
}
fn default_train_samples() -> usize {
    2000
}
fn default_test_samples() -> usize {
    1000
}
fn default_data_seed() -> u64 {
    1234
}
fn default_eval_eps() -> f64 {
    2.0 / 255.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_epsilons", deserialize_with = "radii")]
    pub epsilons: Vec<f64>,
    /// Prepend an `ε = 0` (clean) point to the sweep.
    #[serde(default = "yes")]
    pub include_clean: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilons: default_epsilons(),
            include_clean: true,
        }
    }
}

impl AttackSection {
    /// Sorted sweep radii including the clean point when requested.
    pub fn sweep(&self) -> Vec<f64> {
        let mut e = self.epsilons.clone();
        if self.include_clean && !e.contains(&0.0) {
            e.push(0.0);
        }
        e.sort_by(f64::total_cmp);
        e
    }
}

fn default_epsilons() -> Vec<f64> {
    [1.0, 2.0, 4.0, 8.0].iter().map(|k| k / 255.0).collect()
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Write into a fresh `run-<unix seconds>-<hash>` subdirectory.
    #[serde(default = "yes")]
    pub timestamped: bool,
    #[serde(default = "yes")]
    pub checkpoints: bool,
    #[serde(default = "yes")]
    pub svg: bool,
    /// Samples per mode used for residual traces.
    #[serde(default = "default_trace_samples")]
    pub trace_samples: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            timestamped: true,
            checkpoints: true,
            svg: true,
            trace_samples: default_trace_samples(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_trace_samples() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub pursuit: PursuitSection,
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Radius {
    Number(f64),
    Text(String),
}

impl Radius {
    fn value<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        let v = match self {
            Radius::Number(v) => v,
            Radius::Text(s) => parse_radius(&s).map_err(E::custom)?,
        };
        if !(v >= 0.0) || !v.is_finite() {
            return Err(E::custom(format!("radius {v} must be a finite value ≥ 0")));
        }
        Ok(v)
    }
}

/// `"0.01"`, `"2/255"` or `"2 / 255"`.
pub fn parse_radius(s: &str) -> std::result::Result<f64, String> {
    let bad = || format!("cannot read {s:?} as a radius");
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            Ok(a / b)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

fn radius<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Radius::deserialize(d)?.value()
}

fn radii<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<Radius>::deserialize(d)?.into_iter().map(Radius::value).collect()
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.chain_spec().map_err(|e| Error::Config(format!("[network]: {e}")))?;
        if self.pursuit.modes.is_empty() {
            return Err(Error::Config("[pursuit] modes is empty".into()));
        }
        if self.pursuit.iterations.is_empty() {
            return Err(Error::Config("[pursuit] iterations is empty".into()));
        }
        if !(0.0..1.0).contains(&self.pursuit.alpha) {
            return Err(Error::Config(format!("[pursuit] alpha {} outside [0, 1)", self.pursuit.alpha)));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("[train] seeds is empty".into()));
        }
        if self.train.batch_size == 0 || self.train.train_samples == 0 || self.train.test_samples == 0 {
            return Err(Error::Config("[train] batch size and sample counts must be at least 1".into()));
        }
        if self.train.downsample == 0 {
            return Err(Error::Config("[train] downsample factor must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical TOML with every default filled in.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON encoding, so key order and defaults
    /// in the source file do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 16 hex digits of [`ExperimentConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
