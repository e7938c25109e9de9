//! Datasets: a synthetic Gaussian-blob generator and an IDX (MNIST) reader.
//!
//! IDX headers are big-endian, unlike the little-endian wire protocol.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::rng::{stream, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard MNIST file names inside a dataset directory.
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    BadSpec(String),
    #[error("bad IDX magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("images file has {images} items, labels file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated IDX file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DataError::BadSpec(format!(
                "{} features for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DataError::BadSpec(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Features and labels of the given rows, gathered contiguously.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<u32>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &i in rows {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

/// Class centers drawn uniformly on the sphere of the given radius.
fn class_means(dim: usize, num_classes: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from(seed, &[stream::DATA, 0]);
    (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x * separation / norm).collect();
            }
        })
        .collect()
}

fn blobs(means: &[Vec<f64>], n: usize, rng: &mut Rng) -> Dataset {
    let (c, d) = (means.len(), means[0].len());
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % c;
        features.extend(means[label].iter().map(|m| m + rng.normal()));
        labels.push(label as u32);
    }
    Dataset::new(features, labels, d, c).expect("generated shapes are consistent")
}

fn check_synth(n: usize, dim: usize, num_classes: usize, separation: f64) -> Result<(), DataError> {
    if num_classes < 2 || n < num_classes || dim < 1 || !separation.is_finite() {
        return Err(DataError::BadSpec(format!(
            "n={n}, d={dim}, classes={num_classes}, separation={separation}"
        )));
    }
    Ok(())
}

/// `n` samples of unit-variance Gaussian blobs around `num_classes` centers
/// placed on a sphere of radius `separation`. Sample `i` has label `i mod c`.
pub fn synth_classification(
    n: usize,
    dim: usize,
    num_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    check_synth(n, dim, num_classes, separation)?;
    let means = class_means(dim, num_classes, separation, seed);
    Ok(blobs(&means, n, &mut Rng::seed_from(seed, &[stream::DATA, 1])))
}

/// Training set from [`synth_classification`] plus a held-out set drawn
/// around the same centers from a separate stream. The held-out set is a
/// quarter of `n`, i.e. 20% of all generated samples.
pub fn synth_train_test(
    n: usize,
    dim: usize,
    num_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let train = synth_classification(n, dim, num_classes, separation, seed)?;
    let means = class_means(dim, num_classes, separation, seed);
    let n_test = (n / 4).max(num_classes);
    let test = blobs(&means, n_test, &mut Rng::seed_from(seed, &[stream::TEST_DATA]));
    Ok((train, test))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses in-memory IDX image and label files. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    check_magic(labels, IDX_LABELS_MAGIC)?;
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let pixel_end = 16 + n_images * dim;
    let pixels = images.get(16..pixel_end).ok_or(DataError::Truncated {
        needed: pixel_end,
        available: images.len(),
    })?;
    let label_bytes = labels.get(8..8 + n_labels).ok_or(DataError::Truncated {
        needed: 8 + n_labels,
        available: labels.len(),
    })?;
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<u32> = label_bytes.iter().map(|&l| u32::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(10);
    Dataset::new(features, labels, dim, num_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Loads the MNIST train and test splits from a directory holding the four
/// standard (decompressed) files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    let test = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
    Ok((train, test))
}

/// Serializes raw u8 images (`n × rows × cols`) and labels as IDX bytes.
pub fn encode_idx(images: &[u8], labels: &[u8], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    assert_eq!(images.len(), n * rows * cols);
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}
