//! Labeled image sets: the CIFAR-10 binary format, average-pool
//! downsampling and a synthetic Gaussian-cluster generator.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dictionary::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "DEEP_PURSUIT_DATA_DIR";
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Cifar10,
    Cifar10Downsampled,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Cifar10 => "cifar10",
            Provenance::Cifar10Downsampled => "cifar10-downsampled",
            Provenance::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, provenance: Provenance, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            provenance,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        Tensor::from_parts(vec![c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        Dataset {
            images: Tensor::from_parts(vec![n, c, h, w], self.images.data()[..n * per].to_vec()),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Tensor::zeros(&[0, 0, 0, 0]),
            labels: Vec::new(),
            classes: self.classes,
            provenance: self.provenance,
            split: self.split,
        }
    }

    /// Checks that samples fit the network input and label range.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let len: usize = self.image_shape().iter().product();
        let want: usize = spec.input.iter().product();
        if len != want {
            return Err(Error::Data(format!(
                "images {:?} do not fit network input {:?}",
                self.image_shape(),
                spec.input
            )));
        }
        if self.classes > spec.classes {
            return Err(Error::Data(format!(
                "dataset has {} classes but the network predicts {}",
                self.classes, spec.classes
            )));
        }
        Ok(())
    }
}

/// Parses one CIFAR-10 batch file body: `label, R[1024], G[1024], B[1024]`
/// per record.
pub fn parse_cifar_batch(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() != CIFAR_BATCH_RECORDS * CIFAR_RECORD {
        return Err(Error::Data(format!(
            "batch has {} bytes, expected {} ({} records of {})",
            bytes.len(),
            CIFAR_BATCH_RECORDS * CIFAR_RECORD,
            CIFAR_BATCH_RECORDS,
            CIFAR_RECORD
        )));
    }
    parse_records(bytes, split)
}

/// Like [`parse_cifar_batch`] without the fixed record count.
pub fn parse_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, 3, 32, 32], pixels),
        labels,
        classes: 10,
        provenance: Provenance::Cifar10,
        split,
    })
}

/// Inverse of [`parse_records`] for full-resolution data.
pub fn serialize_cifar(data: &Dataset) -> Result<Vec<u8>> {
    if data.image_shape() != [3, 32, 32] {
        return Err(Error::Data(format!("{:?} is not a CIFAR-10 image shape", data.image_shape())));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (i, &label) in data.labels.iter().enumerate() {
        out.push(u8::try_from(label).map_err(|_| Error::Data(format!("label {label} does not fit a byte")))?);
        for &v in &data.images.data()[i * 3072..(i + 1) * 3072] {
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Directory given explicitly, else the `DEEP_PURSUIT_DATA_DIR` variable.
pub fn resolve_data_dir(dir: Option<&Path>) -> Result<PathBuf> {
    match dir {
        Some(d) => Ok(d.to_path_buf()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Data(format!("no data directory given and {DATA_DIR_ENV} is not set"))),
    }
}

pub fn cifar_available(dir: &Path) -> bool {
    CIFAR_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR_TEST_FILE))
        .all(|f| dir.join(f).is_file())
}

/// Loads the five training batches and the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_bytes = Vec::with_capacity(5 * CIFAR_BATCH_RECORDS * CIFAR_RECORD);
    for f in CIFAR_TRAIN_FILES {
        let bytes = read(&dir.join(f))?;
        parse_cifar_batch(&bytes, Split::Train).map_err(|e| Error::Data(format!("{f}: {e}")))?;
        train_bytes.extend_from_slice(&bytes);
    }
    let train = parse_records(&train_bytes, Split::Train)?;
    let test_bytes = read(&dir.join(CIFAR_TEST_FILE))?;
    let test = parse_cifar_batch(&test_bytes, Split::Test).map_err(|e| Error::Data(format!("{CIFAR_TEST_FILE}: {e}")))?;
    Ok((train, test))
}

/// Average-pools every image by `factor` in both spatial directions.
pub fn downsample(data: &Dataset, factor: usize) -> Result<Dataset> {
    let [c, h, w] = data.image_shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Data(format!("{h}×{w} images are not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(data.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(data.len() * c * oh * ow);
    for img in data.images.data().chunks_exact(c * h * w) {
        for ch in 0..c {
            let plane = &img[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += plane[(oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out.push(s / area);
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![data.len(), c, oh, ow], out),
        labels: data.labels.clone(),
        classes: data.classes,
        provenance: match data.provenance {
            Provenance::Synthetic => Provenance::Synthetic,
            _ => Provenance::Cifar10Downsampled,
        },
        split: data.split,
    })
}

/// Gaussian class clusters around smooth random templates, squashed into
/// `[0, 1]` by a logistic function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub shape: [usize; 3],
    /// Scale of the class templates.
    pub margin: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(classes: usize, shape: [usize; 3], seed: u64) -> Self {
        SynthConfig {
            classes,
            shape,
            margin: 1.5,
            noise: 1.0,
            seed,
        }
    }

    fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let [c, h, w] = self.shape;
        (0..self.classes)
            .map(|_| {
                let raw: Vec<f64> = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut t = box_blur(&raw, c, h, w);
                let norm = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt().max(1e-12);
                t.iter_mut().for_each(|v| *v *= self.margin / norm);
                t
            })
            .collect()
    }

    /// `n` balanced samples in shuffled order. Train and test splits share
    /// templates but draw independent noise.
    pub fn generate(&self, n: usize, split: Split) -> Result<Dataset> {
        if self.classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {}", self.classes)));
        }
        if n == 0 {
            return Err(Error::Data("synthetic dataset must have at least one sample".into()));
        }
        let templates = self.templates();
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let len: usize = self.shape.iter().product();
        let mut pixels = Vec::with_capacity(n * len);
        for &l in &labels {
            for &m in &templates[l] {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = m + self.noise * z;
                pixels.push(1.0 / (1.0 + (-v).exp()));
            }
        }
        let [c, h, w] = self.shape;
        Dataset::new(
            Tensor::new(vec![n, c, h, w], pixels)?,
            labels,
            self.classes,
            Provenance::Synthetic,
            split,
        )
    }
}

pub fn synth_dataset(classes: usize, shape: [usize; 3], n: usize, seed: u64) -> Result<Dataset> {
    SynthConfig::new(classes, shape, seed).generate(n, Split::Train)
}

fn box_blur(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                let mut k = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xc) = (y as i64 + dy, xx as i64 + dx);
                        if yy >= 0 && xc >= 0 && (yy as usize) < h && (xc as usize) < w {
                            s += x[ch * h * w + yy as usize * w + xc as usize];
                            k += 1.0;
                        }
                    }
                }
                out[ch * h * w + y * w + xx] = s / k;
            }
        }
    }
    out
}
