//! MNIST (IDX) and CIFAR-10 (binary) loaders, a synthetic image dataset, and
//! deterministic batching.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images (`N×C×H×W`, values in `[0,1]`) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// A materialized set of samples: images plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous sub-batches of at most `size` samples, in order.
    pub fn chunks(&self, size: usize) -> Vec<Batch> {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
                Batch {
                    images: self.images.select_rows(&idx),
                    labels: idx.iter().map(|&i| self.labels[i]).collect(),
                }
            })
            .collect()
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if images.shape().len() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
            return Err(DataError::LabelOutOfRange {
                label: label.min(255) as u8,
                index,
            }
            .into());
        }
        Ok(Dataset {
            name,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.batch(&idx);
        Dataset {
            name: self.name.clone(),
            images: b.images,
            labels: b.labels,
        }
    }
}

/// A fixed subset of a dataset reused for every measurement of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSet {
    indices: Vec<usize>,
}

pub const DEFAULT_EVAL_SIZE: usize = 1000;

impl EvalSet {
    /// `size` distinct indices drawn without replacement from `0..len`
    /// (capped at `len`).
    pub fn sample(len: usize, size: usize, seed: u64) -> Result<Self> {
        if len == 0 || size == 0 {
            return Err(DataError::Empty("evaluation set".into()).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(size.min(len));
        Ok(EvalSet { indices: idx })
    }

    pub fn from_indices(indices: Vec<usize>, len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(DataError::Empty("evaluation set".into()).into());
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::invalid("evaluation indices must be unique"));
        }
        if sorted.last().is_some_and(|&i| i >= len) {
            return Err(Error::invalid("evaluation index out of range"));
        }
        Ok(EvalSet { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.indices.hash(&mut h);
        h.finish()
    }

    pub fn materialize(&self, ds: &Dataset) -> Batch {
        ds.batch(&self.indices)
    }
}

/// Content hash of a batch, used to tag per-unit means.
pub fn batch_fingerprint(batch: &Batch) -> u64 {
    let mut h = DefaultHasher::new();
    batch.images.shape().hash(&mut h);
    for v in batch.images.data() {
        v.to_bits().hash(&mut h);
    }
    batch.labels.hash(&mut h);
    h.finish()
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes.get(at..at + 4).ok_or(DataError::Truncated {
        needed: at + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

fn expect_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { found, expected }.into());
    }
    Ok(())
}

/// Parses an IDX image file (`0x00000803`, big-endian `n, rows, cols`).
/// Pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    expect_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Empty("IDX image file".into()).into());
    }
    let data = bytes[16..needed]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX label file (`0x00000801`, big-endian `n`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    expect_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    bytes[8..needed]
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if label > 9 {
                Err(DataError::LabelOutOfRange { label, index }.into())
            } else {
                Ok(label as usize)
            }
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes single-channel images as IDX. Values are rounded to the nearest
/// multiple of 1/255.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!(
            "IDX images must be N×1×H×W, got {s:?}"
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(path.to_path_buf()).into()
        } else {
            Error::io(path, e)
        }
    })
}

fn find_first(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| DataError::Missing(dir.join(names[0])).into())
}

fn load_idx_pair(dir: &Path, prefix: &str, name: &str) -> Result<Dataset> {
    let img = find_first(
        dir,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    )?;
    let lab = find_first(
        dir,
        &[
            &format!("{prefix}-labels-idx1-ubyte"),
            &format!("{prefix}-labels.idx1-ubyte"),
        ],
    )?;
    let images = parse_idx_images(&read_file(&img)?)?;
    let labels = parse_idx_labels(&read_file(&lab)?)?;
    Dataset::new(name, images, labels)
}

/// Loads `train-*` and `t10k-*` IDX files (uncompressed) from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((
        load_idx_pair(dir, "train", "mnist-train")?,
        load_idx_pair(dir, "t10k", "mnist-test")?,
    ))
}

/// True when all four MNIST files are present in `dir`.
pub fn mnist_available(dir: impl AsRef<Path>) -> bool {
    let dir = dir.as_ref();
    ["train-images", "train-labels", "t10k-images", "t10k-labels"]
        .iter()
        .all(|stem| {
            let kind = if stem.ends_with("images") {
                "idx3"
            } else {
                "idx1"
            };
            dir.join(format!("{stem}-{kind}-ubyte")).exists()
                || dir.join(format!("{stem}.{kind}-ubyte")).exists()
        })
}

/// Parses concatenated CIFAR-10 records: one label byte then 1024 red, 1024
/// green and 1024 blue pixel bytes.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::RecordMisaligned {
            len: bytes.len(),
            record: CIFAR_RECORD,
        }
        .into());
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(DataError::LabelOutOfRange { label, index }.into());
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_from_files(paths: &[PathBuf], name: &str) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = parse_cifar_records(&read_file(p)?)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(DataError::Empty(name.into()).into());
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(name, images, labels)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let test = vec![dir.join("test_batch.bin")];
    Ok((
        cifar_from_files(&train, "cifar10-train")?,
        cifar_from_files(&test, "cifar10-test")?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub n: usize,
    pub seed: u64,
    pub shape: [usize; 3],
    /// Bump height divided by the per-pixel noise standard deviation.
    pub separation: f64,
    /// Largest per-sample shift of the bump center along each axis, in pixels.
    pub jitter: f64,
}

impl SyntheticConfig {
    pub fn new(classes: usize, n: usize, seed: u64) -> Self {
        SyntheticConfig {
            classes,
            n,
            seed,
            shape: [1, 28, 28],
            separation: 6.0,
            jitter: 0.0,
        }
    }

    pub fn with_shape(mut self, shape: [usize; 3]) -> Self {
        self.shape = shape;
        self
    }

    pub fn with_separation(mut self, separation: f64) -> Self {
        self.separation = separation;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }
}

/// Gaussian class blobs on 1×28×28 images.
pub fn synthetic_blobs(classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    synthetic(SyntheticConfig::new(classes, n, seed))
}

/// Each class is a unit-height Gaussian bump at its own spot on a circle
/// around the image center. Every sample shifts its bump by up to `jitter`
/// pixels per axis and adds independent pixel noise with standard deviation
/// `1 / separation`. Pixels are clamped to `[0, 1]` and quantized to multiples
/// of 1/255, so the data survives an IDX round-trip unchanged.
pub fn synthetic(cfg: SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.classes > 10 {
        return Err(Error::invalid(format!(
            "synthetic data needs 2..=10 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.n == 0 {
        return Err(DataError::Empty("synthetic dataset with n = 0".into()).into());
    }
    if cfg.separation.is_nan() || cfg.separation <= 0.0 {
        return Err(Error::invalid("separation must be positive"));
    }
    if !(cfg.jitter >= 0.0 && cfg.jitter.is_finite()) {
        return Err(Error::invalid(
            "jitter must be a finite non-negative number",
        ));
    }
    let [c, h, w] = cfg.shape;
    let plane = h * w;
    let width = (h.min(w) as f64 / 8.0).max(1.0);
    let radius = h.min(w) as f64 / 4.0;
    let centers: Vec<(f64, f64)> = (0..cfg.classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / cfg.classes as f64;
            (
                (h as f64 - 1.0) / 2.0 + radius * angle.sin(),
                (w as f64 - 1.0) / 2.0 + radius * angle.cos(),
            )
        })
        .collect();
    let sigma = 1.0 / cfg.separation;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(cfg.n * c * plane);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut bump = vec![0.0; plane];
    for i in 0..cfg.n {
        let k = i % cfg.classes;
        labels.push(k);
        let (mut cy, mut cx) = centers[k];
        if cfg.jitter > 0.0 {
            cy += rng.random_range(-cfg.jitter..=cfg.jitter);
            cx += rng.random_range(-cfg.jitter..=cfg.jitter);
        }
        for (j, b) in bump.iter_mut().enumerate() {
            let (y, x) = ((j / w) as f64, (j % w) as f64);
            *b = (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * width * width)).exp();
        }
        for _ in 0..c {
            for &m in &bump {
                let z: f64 = rng.sample(StandardNormal);
                data.push(to_byte(m + sigma * z) as f64 / 255.0);
            }
        }
    }
    let images = Tensor::new(vec![cfg.n, c, h, w], data)?;
    Dataset::new(
        format!("synthetic-{}c-s{}", cfg.classes, cfg.seed),
        images,
        labels,
    )
}

/// Mini-batch index lists for one epoch: a seeded permutation cut into
/// `batch_size` pieces, keeping the short final batch.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        .wrapping_add(epoch as u64 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        v
    }

    #[test]
    fn idx_images_accepted_and_scaled() {
        let t = parse_idx_images(&idx_images(3, 28, 28, 255)).unwrap();
        assert_eq!(t.shape(), &[3, 1, 28, 28]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_errors_are_distinct() {
        let mut bad = idx_images(2, 2, 2, 0);
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(Error::Data(DataError::BadMagic { found: 0x801, .. }))
        ));
        let short = &idx_images(2, 2, 2, 0)[..20];
        assert!(matches!(
            parse_idx_images(short),
            Err(Error::Data(DataError::Truncated { .. }))
        ));
        let mut labels = encode_idx_labels(&[1, 2, 3]);
        labels[9] = 10;
        assert!(matches!(
            parse_idx_labels(&labels),
            Err(Error::Data(DataError::LabelOutOfRange {
                label: 10,
                index: 1
            }))
        ));
    }

    #[test]
    fn mismatched_counts_rejected() {
        let images = parse_idx_images(&idx_images(2, 2, 2, 0)).unwrap();
        assert!(matches!(
            Dataset::new("x", images, vec![1, 2, 3]),
            Err(Error::Data(DataError::CountMismatch { .. }))
        ));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for label in [9u8, 0] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, 1024));
            bytes.extend(std::iter::repeat_n(0u8, 1024));
            bytes.extend(std::iter::repeat_n(51u8, 1024));
        }
        let (px, labels) = parse_cifar_records(&bytes).unwrap();
        assert_eq!(labels, vec![9, 0]);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1024], 0.0);
        assert_eq!(px[2048], 0.2);
        assert!(matches!(
            parse_cifar_records(&bytes[..100]),
            Err(Error::Data(DataError::RecordMisaligned { .. }))
        ));
        assert_eq!(30_730_000 % CIFAR_RECORD, 0);
        assert_eq!(30_730_000 / CIFAR_RECORD, 10_000);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_blobs(2, 200, 7).unwrap();
        let b = synthetic_blobs(2, 200, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_blobs(2, 200, 8).unwrap());
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synthetic_blobs(2, 0, 7).is_err());
        assert!(synthetic_blobs(1, 10, 7).is_err());
    }

    #[test]
    fn synthetic_survives_idx_round_trip() {
        let ds = synthetic(SyntheticConfig::new(3, 30, 1).with_shape([1, 12, 12])).unwrap();
        let images = parse_idx_images(&encode_idx_images(&ds.images).unwrap()).unwrap();
        let labels = parse_idx_labels(&encode_idx_labels(&ds.labels)).unwrap();
        assert_eq!(images, ds.images);
        assert_eq!(labels, ds.labels);
    }

    #[test]
    fn batching() {
        let b = batches(100, 32, 3).unwrap();
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        assert_eq!(b, batches(100, 32, 3).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(batches(60_000, 32, 0).unwrap().len(), 1875);
        assert!(batches(10, 0, 0).is_err());
    }

    #[test]
    fn eval_set_indices_unique() {
        let e = EvalSet::sample(50, 20, 4).unwrap();
        let mut idx = e.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
        assert_eq!(EvalSet::sample(5, 1000, 4).unwrap().len(), 5);
        assert!(EvalSet::from_indices(vec![1, 1], 5).is_err());
        assert!(EvalSet::from_indices(vec![7], 5).is_err());
    }
}
