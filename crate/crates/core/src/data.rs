//! In-memory image classification datasets: IDX files (optionally gzipped)
//! and Gaussian blobs.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-pixel affine normalization applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const MNIST: Normalization = Normalization {
        mean: 0.1307,
        std: 0.3081,
    };
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };
}

/// Samples stored contiguously as `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(channels, height, width)`.
    pub shape: [usize; 3],
    pub classes: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} samples of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            shape,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Gathers the listed samples into an `[n, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], data).expect("sizes agree");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Keeps the first `n` samples after a shuffle under `seed`.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::Dataset(format!(
                "subset of {n} requested from {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        let (x, labels) = self.batch(&order);
        Dataset::new(self.shape, self.classes, x.into_data(), labels)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Dataset(format!("{}: truncated header", path.display())))
}

/// Parses an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// then normalized.
pub fn load_mnist_idx(images: &Path, labels: &Path, norm: Normalization) -> Result<Dataset> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images.display()
        )));
    }
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels.display()
        )));
    }
    let n_img = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let n_lab = be_u32(&lab, 4, labels)? as usize;
    if n_img != n_lab {
        return Err(Error::Dataset(format!(
            "image file has {n_img} samples but label file has {n_lab}"
        )));
    }
    let body = &img[16..];
    if body.len() < n_img * rows * cols {
        return Err(Error::Dataset(format!(
            "{}: truncated payload, {} of {} bytes",
            images.display(),
            body.len(),
            n_img * rows * cols
        )));
    }
    let lbody = &lab[8..];
    if lbody.len() < n_lab {
        return Err(Error::Dataset(format!(
            "{}: truncated payload, {} of {n_lab} bytes",
            labels.display(),
            lbody.len()
        )));
    }
    let pixels = body[..n_img * rows * cols]
        .iter()
        .map(|&p| (p as f64 / 255.0 - norm.mean) / norm.std)
        .collect();
    let ys: Vec<usize> = lbody[..n_lab].iter().map(|&y| y as usize).collect();
    let classes = ys.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new([1, rows, cols], classes, pixels, ys)
}

/// Loads `train-*` and `t10k-*` IDX files from one directory, gzipped or
/// not.
pub fn load_mnist_dir(dir: &Path, norm: Normalization) -> Result<DatasetHandle> {
    let find = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let train = load_mnist_idx(&find("train-images-idx3-ubyte"), &find("train-labels-idx1-ubyte"), norm)?;
    let test = load_mnist_idx(&find("t10k-images-idx3-ubyte"), &find("t10k-labels-idx1-ubyte"), norm)?;
    Ok(DatasetHandle {
        train,
        test,
        normalization: norm,
    })
}

/// Unit-variance Gaussian blobs of shape `(dim, 1, 1)`, labels assigned
/// round-robin. Class means sit 8 apart on distinct axes (or along the
/// first axis when there are more classes than dimensions), so every pair
/// is at least 8 standard deviations apart.
pub fn make_synthetic(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::Dataset(
            "synthetic data needs at least two classes and one dimension".into(),
        ));
    }
    const SPACING: f64 = 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for d in 0..dim {
            let mean = if classes <= dim {
                if d == y {
                    SPACING
                } else {
                    0.0
                }
            } else if d == 0 {
                SPACING * y as f64
            } else {
                0.0
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            pixels.push(mean + z);
        }
        labels.push(y);
    }
    Dataset::new([dim, 1, 1], classes, pixels, labels)
}
