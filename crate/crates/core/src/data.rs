//! Image datasets: MNIST IDX, CIFAR-10 binary batches, a synthetic
//! generator, and seeded stratified subsetting.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ActivationStack;

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Labeled images, pixels in `[0, 1]` unless mean-subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ActivationStack,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Copies the images at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_frames(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
        }
    }

    /// Per-pixel mean image (`h × w × channels` values).
    pub fn pixel_mean(&self) -> Vec<f64> {
        let len = self.images.frame_len();
        let mut mean = vec![0.0; len];
        for f in 0..self.images.n() {
            for (m, v) in mean.iter_mut().zip(self.images.frame(f)) {
                *m += v;
            }
        }
        let n = self.images.n() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Subtracts `mean` from every image.
    pub fn subtract_mean(&mut self, mean: &[f64]) -> Result<()> {
        let len = self.images.frame_len();
        if mean.len() != len {
            return Err(Error::Dimension(format!(
                "mean image has {} values, frames have {len}",
                mean.len()
            )));
        }
        for chunk in self.images.data_mut().chunks_mut(len) {
            chunk.iter_mut().zip(mean).for_each(|(v, m)| *v -= m);
        }
        Ok(())
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Decodes an IDX image file and its label file.
pub fn parse_mnist(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "images")?;
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(image_bytes, 4, "images")? as usize;
    let rows = be_u32(image_bytes, 8, "images")? as usize;
    let cols = be_u32(image_bytes, 12, "images")? as usize;
    let magic = be_u32(label_bytes, 0, "labels")?;
    if magic != MNIST_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let label_count = be_u32(label_bytes, 4, "labels")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let pixels = &image_bytes[16..];
    if pixels.len() < count * rows * cols {
        return Err(Error::Format(format!(
            "image file truncated: {} pixel bytes for {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let labels = &label_bytes[8..];
    if labels.len() < count {
        return Err(Error::Format(format!(
            "label file truncated: {} of {count}",
            labels.len()
        )));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("empty MNIST file".into()));
    }
    let data = pixels[..count * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels[..count].iter().map(|&b| b as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Format(format!("label {bad} outside 0..10")));
    }
    Ok(Dataset {
        images: ActivationStack::from_raw(count, rows, cols, 1, data),
        labels,
        class_count: 10,
        name: "mnist".into(),
    })
}

pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    parse_mnist(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// Decodes concatenated CIFAR-10 records: label byte, then 1024 red, 1024
/// green and 1024 blue bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD_LEN) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!(
                "CIFAR-10 label byte {label} is not below 10"
            )));
        }
        labels.push(label);
        let planes = &rec[1..];
        for p in 0..1024 {
            for ch in 0..3 {
                data.push(planes[ch * 1024 + p] as f64 / 255.0);
            }
        }
    }
    Ok(Dataset {
        images: ActivationStack::from_raw(n, 32, 32, 3, data),
        labels,
        class_count: 10,
        name: "cifar10".into(),
    })
}

pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in batch_paths {
        let p = p.as_ref();
        let chunk = fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        if chunk.is_empty() || chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of records",
                p.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

/// `n` single-channel `h × w` images; class `k` is a fixed random pattern
/// plus bounded noise, `n` spread round-robin over the classes.
pub fn synthetic_blobs(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<Dataset> {
    if c < 2 {
        return Err(Error::DegenerateLabels(format!(
            "synthetic data needs at least 2 classes, got {c}"
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(
            "synthetic dataset dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..h * w)
                .map(|_| if rng.gen_bool(0.5) { 0.8 } else { 0.2 })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        labels.push(k);
        for &base in &patterns[k] {
            data.push((base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
        }
    }
    Ok(Dataset {
        images: ActivationStack::from_raw(n, h, w, 1, data),
        labels,
        class_count: c,
        name: "synthetic".into(),
    })
}

/// Train and test sets drawn from the same class patterns: the first
/// `n_train` images of one [`synthetic_blobs`] draw and the `n_test` after them.
pub fn synthetic_split(
    n_train: usize,
    n_test: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let all = synthetic_blobs(n_train + n_test, h, w, c, seed)?;
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n_train + n_test).collect();
    Ok((all.select(&train), all.select(&test)))
}

/// Seeded stratified sample with `per_class` images of every class (all of
/// them when a class is smaller). Selected images keep their original order.
pub fn subset(dataset: &Dataset, per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..dataset.class_count {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        keep.extend(idx);
    }
    keep.sort_unstable();
    dataset.select(&keep)
}
