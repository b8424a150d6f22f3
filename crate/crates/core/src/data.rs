//! Datasets: synthetic 2-D generators and readers for CIFAR-10 binary and
//! IDX files.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples stored row-major; `features.len() == labels.len() × Π sample_shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        provenance: String,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if features.len() != per * labels.len() {
            return Err(Error::Contract(format!(
                "{} feature values for {} samples of shape {:?}",
                features.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        Ok(Dataset {
            sample_shape,
            features,
            labels,
            classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.features[i * per..(i + 1) * per]
    }

    /// Stacks the given samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn all(&self) -> Result<(Tensor, Vec<usize>)> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            provenance: format!("{} [first {n}]", self.provenance),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// A seeded permutation of all sample indices, cut into batches; the final
/// short batch is kept.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(epoch_seed, "batches", 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Interleaved Archimedean spirals: sample `i` of class `c` sits at angle
/// `θ = 3π(i + ½)/n` along an arm of radius `θ / 3π`, rotated by `2πc/classes`.
pub fn gen_spirals(n_per_class: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_generator(n_per_class, classes, noise)?;
    let mut rng = rng_for(seed, "spirals", 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(2 * n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for i in 0..n_per_class {
        for c in 0..classes {
            let theta = 3.0 * PI * (i as f64 + 0.5) / n_per_class as f64;
            let r = theta / (3.0 * PI);
            let phase = 2.0 * PI * c as f64 / classes as f64;
            let nx = noise * normal.sample(&mut rng);
            let ny = noise * normal.sample(&mut rng);
            features.push(r * (theta + phase).cos() + nx);
            features.push(r * (theta + phase).sin() + ny);
            labels.push(c);
        }
    }
    Dataset::new(
        vec![2],
        features,
        labels,
        classes,
        Split::Train,
        format!("spirals(n={n_per_class}, classes={classes}, noise={noise}, seed={seed})"),
    )
}

/// Concentric rings of radius `c + 1`, uniform angle, radial noise.
pub fn gen_rings(n_per_class: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_generator(n_per_class, classes, noise)?;
    let mut rng = rng_for(seed, "rings", 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_per_class {
        for c in 0..classes {
            let a = rng.gen_range(0.0..2.0 * PI);
            let r = (c + 1) as f64 + noise * normal.sample(&mut rng);
            features.extend([r * a.cos(), r * a.sin()]);
            labels.push(c);
        }
    }
    Dataset::new(
        vec![2],
        features,
        labels,
        classes,
        Split::Train,
        format!("rings(n={n_per_class}, classes={classes}, noise={noise}, seed={seed})"),
    )
}

/// Isotropic Gaussian blobs centred on the unit circle scaled by 3.
pub fn gen_blobs(n_per_class: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_generator(n_per_class, classes, noise)?;
    let mut rng = rng_for(seed, "blobs", 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_per_class {
        for c in 0..classes {
            let a = 2.0 * PI * c as f64 / classes as f64;
            features.push(3.0 * a.cos() + noise * normal.sample(&mut rng));
            features.push(3.0 * a.sin() + noise * normal.sample(&mut rng));
            labels.push(c);
        }
    }
    Dataset::new(
        vec![2],
        features,
        labels,
        classes,
        Split::Train,
        format!("blobs(n={n_per_class}, classes={classes}, noise={noise}, seed={seed})"),
    )
}

fn check_generator(n_per_class: usize, classes: usize, noise: f64) -> Result<()> {
    if n_per_class == 0 || classes < 2 || !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "generator needs n_per_class ≥ 1, classes ≥ 2, noise ≥ 0 (got {n_per_class}, {classes}, {noise})"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Spirals,
    Rings,
    Blobs,
}

/// A synthetic task: train and test splits drawn from independent seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
    pub noise: f64,
}

impl TaskSpec {
    pub fn spirals() -> Self {
        TaskSpec {
            kind: TaskKind::Spirals,
            train_per_class: 256,
            test_per_class: 128,
            classes: 2,
            noise: 0.02,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let gen = match self.kind {
            TaskKind::Spirals => gen_spirals,
            TaskKind::Rings => gen_rings,
            TaskKind::Blobs => gen_blobs,
        };
        let train = gen(
            self.train_per_class,
            self.classes,
            self.noise,
            crate::rng::split_seed(seed, "task-train", 0),
        )?;
        let mut test = gen(
            self.test_per_class,
            self.classes,
            self.noise,
            crate::rng::split_seed(seed, "task-test", 0),
        )?;
        test.split = Split::Test;
        Ok((train, test))
    }
}

/// Per-channel affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    /// Commonly used CIFAR-10 training-set statistics.
    pub fn cifar10() -> Self {
        ChannelNorm {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    fn apply(&self, values: &mut [f64], plane: usize, f: impl Fn(f64, f64, f64) -> f64) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
    }

    /// `(x − mean) / std` for channel-major samples with `plane` values per
    /// channel.
    pub fn normalize(&self, values: &mut [f64], plane: usize) {
        self.apply(values, plane, |x, m, s| (x - m) / s);
    }

    pub fn denormalize(&self, values: &mut [f64], plane: usize) {
        self.apply(values, plane, |x, m, s| x * s + m);
    }
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PLANE: usize = 1024;

/// Parses CIFAR-10 binary batches: per record one label byte, then 1024 red,
/// 1024 green and 1024 blue bytes. Pixels are scaled to `[0, 1]` and then
/// standardized with `norm`.
pub fn parse_cifar10_bin(bytes: &[u8], norm: &ChannelNorm, provenance: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!(
                "record {i} has label byte {}",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        let start = features.len();
        features.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        norm.normalize(&mut features[start..], CIFAR_PLANE);
    }
    Dataset::new(
        vec![3, 32, 32],
        features,
        labels,
        10,
        Split::Train,
        provenance.to_string(),
    )
}

pub fn read_cifar10_bin(path: &Path, norm: &ChannelNorm) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let digest = crc32fast::hash(&bytes);
    parse_cifar10_bin(&bytes, norm, &format!("{} crc32={digest:08x}", path.display()))
}

/// An IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses the IDX header (two zero bytes, type 0x08, dimension count, then
/// big-endian u32 extents) and the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("missing IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "IDX element type 0x{:02x} is not unsigned byte",
            bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() - header != count {
        return Err(Error::Format(format!(
            "IDX payload holds {} bytes, dimensions {:?} need {count}",
            bytes.len() - header,
            dims
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Pairs an IDX image file (`n × h × w`) with its label file (`n`).
pub fn read_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = parse_idx(&fs::read(images)?)?;
    let lab = parse_idx(&fs::read(labels)?)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
        return Err(Error::Format(format!(
            "IDX shapes {:?} and {:?} do not pair as images and labels",
            img.dims, lab.dims
        )));
    }
    Dataset::new(
        vec![1, img.dims[1], img.dims[2]],
        img.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        lab.data.iter().map(|&b| b as usize).collect(),
        classes,
        Split::Train,
        format!("idx {} / {}", images.display(), labels.display()),
    )
}

/// Mirrors every image of a `[n, c, h, w]` batch left to right.
pub fn hflip(batch: &Tensor) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::dim("hflip", s, &[0, 0, 0, 0]));
    }
    let w = s[3];
    let mut out = batch.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}
