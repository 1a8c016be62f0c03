//! MNIST (IDX) and CIFAR-10 (binary batch) loaders and deterministic
//! minibatch ordering.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_BATCH: usize = 10_000;
pub const CIFAR_TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_BATCH: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn classes(self) -> usize {
        10
    }

    /// Loads the train and test splits, normalized with training statistics.
    pub fn load(self, dir: &Path) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self {
            DatasetKind::Mnist => (
                load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS), Split::Train)?,
                load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS), Split::Test)?,
            ),
            DatasetKind::Cifar10 => load_cifar10(dir)?,
        };
        let stats = Normalization::fit(&train);
        stats.apply(&mut train);
        stats.apply(&mut test);
        Ok((train, test))
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::argument(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `N x C x H x W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

/// One minibatch, gathered out of a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Corruption(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// First `limit` samples (all of them if `limit` is larger).
    pub fn truncate(mut self, limit: usize) -> Self {
        if limit == 0 || limit >= self.len() {
            return self;
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = limit;
        let mut data = self.images.into_data();
        data.truncate(limit * shape[1..].iter().product::<usize>());
        self.images = Tensor::new(shape, data).expect("prefix keeps shape consistent");
        self.labels.truncate(limit);
        self
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let len = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            images: Tensor::new(shape, data).expect("gathered rows match shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Contiguous chunks in storage order, for evaluation.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.gather(&idx)
        })
    }
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(train: &Dataset) -> Self {
        let shape = train.images.shape();
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let data = train.images.data();
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let plane = |s: usize| &data[(s * c + ch) * spatial..(s * c + ch + 1) * spatial];
            let mu = (0..n).map(|s| plane(s).iter().sum::<f64>()).sum::<f64>() / count;
            let var = (0..n)
                .map(|s| plane(s).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[ch] = mu;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, dataset: &mut Dataset) {
        let shape = dataset.images.shape().to_vec();
        let (c, spatial) = (shape[1], shape[2] * shape[3]);
        for (i, v) in dataset.images.data_mut().iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Corruption(format!("{}: truncated header", path.display())))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected image file {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Corruption(format!(
            "{}: header declares {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected label file {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Corruption(format!(
            "{}: header declares {n} labels, file has {}",
            path.display(),
            bytes.len().saturating_sub(8)
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image/label pair with pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Corruption(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Corruption(format!("{}: no images", images.display())));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels.into_iter().map(usize::from).collect(),
        10,
        split,
    )
}

/// Reads one CIFAR-10 binary batch: `label byte + 3072 channel-major pixels`
/// per record.
pub fn load_cifar10_batch(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Corruption(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(usize::from(record[0]));
        pixels.extend(record[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_split(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (p, l) = load_cifar10_batch(path)?;
        if l.len() != CIFAR_RECORDS_PER_BATCH {
            return Err(Error::Corruption(format!(
                "{}: {} records, expected {CIFAR_RECORDS_PER_BATCH}",
                path.display(),
                l.len()
            )));
        }
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = CIFAR_TRAIN_BATCHES.iter().map(|b| dir.join(b)).collect();
    Ok((
        cifar_split(&train, Split::Train)?,
        cifar_split(&[dir.join(CIFAR_TEST_BATCH)], Split::Test)?,
    ))
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Minibatches of one epoch in shuffled order; the final partial batch is
/// dropped.
pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::argument(format!(
            "batch size {batch_size} for {} samples",
            dataset.len()
        )));
    }
    let order = epoch_order(dataset.len(), seed, epoch);
    let batches = dataset.len() / batch_size;
    Ok((0..batches).map(move |b| dataset.gather(&order[b * batch_size..(b + 1) * batch_size])))
}

/// Batch number `iteration` of an endless epoch-by-epoch stream.
pub fn batch_at(dataset: &Dataset, batch_size: usize, seed: u64, iteration: u64, cache: &mut Option<(u64, Vec<usize>)>) -> Batch {
    let per_epoch = (dataset.len() / batch_size) as u64;
    let epoch = iteration / per_epoch;
    let b = (iteration % per_epoch) as usize;
    if cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
        *cache = Some((epoch, epoch_order(dataset.len(), seed, epoch)));
    }
    let order = &cache.as_ref().expect("just filled").1;
    dataset.gather(&order[b * batch_size..(b + 1) * batch_size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny(n: usize) -> Dataset {
        let data = (0..n * 4).map(|i| i as f64).collect();
        Dataset::new(
            Tensor::new(vec![n, 1, 2, 2], data).unwrap(),
            (0..n).map(|i| i % 10).collect(),
            10,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn batches_per_epoch_drop_partial() {
        let d = tiny(10);
        assert_eq!(batch_iterator(&d, 3, 1, 0).unwrap().count(), 3);
        assert!(batch_iterator(&d, 11, 1, 0).is_err());
    }

    #[test]
    fn epoch_order_is_deterministic_permutation() {
        assert_eq!(epoch_order(100, 4, 2), epoch_order(100, 4, 2));
        let a = epoch_order(100, 4, 0);
        let b = epoch_order(100, 4, 1);
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, (0..100).collect::<Vec<_>>());
        assert_eq!(sa, sb);
    }

    #[test]
    fn batch_at_follows_iterator() {
        let d = tiny(10);
        let mut cache = None;
        let from_iter: Vec<Vec<usize>> = (0..2)
            .flat_map(|e| batch_iterator(&d, 3, 9, e).unwrap().map(|b| b.labels).collect::<Vec<_>>())
            .collect();
        let from_at: Vec<Vec<usize>> = (0..6).map(|t| batch_at(&d, 3, 9, t, &mut cache).labels).collect();
        assert_eq!(from_iter, from_at);
    }

    #[test]
    fn cifar_label_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut f = fs::File::create(&path).unwrap();
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        f.write_all(&rec).unwrap();
        f.write_all(&rec).unwrap();
        drop(f);
        let (pixels, labels) = load_cifar10_batch(&path).unwrap();
        assert_eq!(labels, vec![7, 7]);
        assert_eq!(pixels[1], 1.0 / 255.0);
        assert_eq!(pixels.len(), 2 * 3072);
    }

    #[test]
    fn normalization_uses_training_stats() {
        let mut train = tiny(4);
        let mut test = tiny(2);
        let stats = Normalization::fit(&train);
        stats.apply(&mut train);
        stats.apply(&mut test);
        let mean: f64 = train.images.data().iter().sum::<f64>() / train.images.len() as f64;
        assert!(mean.abs() < 1e-12);
        // The test split reuses the training mean (7.5), not its own (3.5).
        assert!(test.images.data().iter().sum::<f64>() / 8.0 < -0.5);
    }
}
