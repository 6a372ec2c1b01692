//! In-memory classification datasets: Gaussian blobs and IDX (MNIST) files.

use std::path::Path;

use ghostnoise_core::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major features `n x dim` with a label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, classes: self.classes, features, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { dim: self.dim, classes: self.classes, features: self.features[..n * self.dim].to_vec(), labels: self.labels[..n].to_vec() }
    }

    /// Features of `indices` as a (len, dim, 1, 1) tensor, with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.subset(indices);
        Ok((Tensor::new([indices.len(), self.dim, 1, 1], s.features)?, s.labels))
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new([self.len(), self.dim, 1, 1], self.features.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Shuffles with `rng` and cuts 80/10/10 into train, validation and test.
pub fn split(data: &Dataset, rng: &mut RngStream) -> Splits {
    let perm = rng.permutation(data.len());
    let n_train = data.len() * 8 / 10;
    let n_val = data.len() / 10;
    Splits {
        train: data.subset(&perm[..n_train]),
        val: data.subset(&perm[n_train..n_train + n_val]),
        test: data.subset(&perm[n_train + n_val..]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub label_noise: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self { n: 10_000, dim: 64, classes: 10, separation: 3.0, label_noise: 0.1 }
    }
}

/// `classes` centers placed uniformly on the sphere of radius `separation`,
/// unit-variance Gaussian samples around them (classes balanced), then a
/// `label_noise` fraction of labels redrawn uniformly over all classes.
pub fn make_blobs(cfg: &BlobsConfig, rng: &mut RngStream) -> Result<Dataset> {
    let BlobsConfig { n, dim, classes, separation, label_noise } = *cfg;
    if classes < 2 || n < classes || dim == 0 {
        return Err(TrainError::Config(format!("blobs need n >= classes >= 2 and dim >= 1, got n={n} classes={classes} dim={dim}")));
    }
    if !(0.0..=1.0).contains(&label_noise) || !(separation >= 0.0 && separation.is_finite()) {
        return Err(TrainError::Config(format!("invalid label_noise {label_noise} or separation {separation}")));
    }
    let mut centers = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        centers.extend(v.iter().map(|x| x / norm * separation));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        features.extend(centers[y * dim..(y + 1) * dim].iter().map(|&c| c + rng.normal()));
    }
    let noisy = (label_noise * n as f64).round() as usize;
    for &i in &rng.permutation(n)[..noisy] {
        labels[i] = rng.index(classes);
    }
    Ok(Dataset { dim, classes, features, labels })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Checks magic and length; returns the declared dimensions.
fn idx_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * ndims;
    let truncated = |expected: u64| TrainError::Truncated { path: path.to_path_buf(), expected, found: bytes.len() as u64 };
    if bytes.len() < 4 {
        return Err(truncated(header as u64));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(TrainError::BadMagic { path: path.to_path_buf(), expected: magic, found });
    }
    if bytes.len() < header {
        return Err(truncated(header as u64));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header as u64 + dims.iter().map(|&d| d as u64).product::<u64>();
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    Ok(dims)
}

/// Parses an IDX image file (u8, dims n x rows x cols) and label file (u8, dims n).
/// Pixels are scaled to [0, 1] and images flattened to `rows * cols` features;
/// the class count is one more than the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let idims = idx_header(ip, &ib, IDX_IMAGES_MAGIC, 3)?;
    let ldims = idx_header(lp, &lb, IDX_LABELS_MAGIC, 1)?;
    let (n, dim) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(TrainError::CountMismatch { images: n, labels: ldims[0] });
    }
    let features = ib[16..16 + n * dim].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset { dim, classes, features, labels })
}
