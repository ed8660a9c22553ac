//! Deterministic data sources: Gaussian blobs and IDX image files.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Cursor, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × d`, row-major.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, provenance: String) -> Result<Self> {
        let n = features.dims2().map(|(n, _)| n).ok_or_else(|| Error::invalid("features must be a matrix"))?;
        if n != labels.len() {
            return Err(Error::invalid(format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Self {
            features: Tensor::new(vec![idx.len(), d], data).expect("consistent"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Items whose label is in `classes`, relabelled to positions in that list.
    pub fn restrict_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut sub = self.subset(&idx);
        for y in &mut sub.labels {
            *y = classes.iter().position(|c| c == y).expect("filtered");
        }
        sub.classes = classes.len();
        sub.provenance = format!("{}[classes={classes:?}]", self.provenance);
        sub
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Minimum distance between any two cluster centers.
    pub separation: f64,
    #[serde(default = "default_std")]
    pub std: f64,
    /// Gaussian modes per class; more than one makes classes non-convex.
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_std() -> f64 {
    1.0
}

fn default_modes() -> usize {
    1
}

impl BlobSpec {
    pub fn new(classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64) -> Self {
        Self {
            classes,
            dim,
            n_per_class,
            separation,
            std: 1.0,
            modes_per_class: 1,
            seed,
        }
    }
}

pub fn make_blobs(k: usize, d: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    make_blobs_from(&BlobSpec::new(k, d, n_per_class, separation, seed))
}

/// Isotropic Gaussian clusters around seed-determined centers that are
/// pairwise at least `separation` apart. Rows are ordered class by class.
pub fn make_blobs_from(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim == 0 || spec.n_per_class == 0 || spec.modes_per_class == 0 {
        return Err(Error::invalid(format!("bad blob spec {spec:?}")));
    }
    if !(spec.separation > 0.0) || !(spec.std > 0.0) {
        return Err(Error::invalid("separation and std must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = sample_centers(spec.classes * spec.modes_per_class, spec.dim, spec.separation, &mut rng);
    let noise = Normal::new(0.0, spec.std).expect("positive std");
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for i in 0..spec.n_per_class {
            let center = &centers[c * spec.modes_per_class + i % spec.modes_per_class];
            data.extend(center.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    let provenance = format!(
        "blobs(k={},d={},n={},sep={},std={},modes={},seed={})",
        spec.classes, spec.dim, spec.n_per_class, spec.separation, spec.std, spec.modes_per_class, spec.seed
    );
    Dataset::new(Tensor::matrix(n, spec.dim, data)?, labels, spec.classes, provenance)
}

fn sample_centers(count: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Start with a spread whose typical pairwise distance is about 1.5x the
    // separation and widen it whenever rejection sampling stalls.
    let mut spread = 1.5 * separation / (2.0 * dim as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut failures = 0;
    while centers.len() < count {
        let normal = Normal::new(0.0, spread).expect("positive spread");
        let cand: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let ok = centers.iter().all(|c| {
            c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
        });
        if ok {
            centers.push(cand);
            failures = 0;
        } else {
            failures += 1;
            if failures > 200 {
                spread *= 1.05;
                failures = 0;
            }
        }
    }
    centers
}

fn read_idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < header_len {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: header_len as u64,
            found: bytes.len() as u64,
        });
    }
    let mut cur = Cursor::new(bytes);
    let found = cur.read_u32::<BigEndian>()?;
    if found != magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let extents = (0..dims)
        .map(|_| cur.read_u32::<BigEndian>().map(|v| v as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let expected = header_len as u64 + extents.iter().map(|&e| e as u64).product::<u64>();
    if (bytes.len() as u64) < expected {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(extents)
}

/// Reads an IDX image file (`0x00000803`, `n × rows × cols` unsigned bytes)
/// and its label file (`0x00000801`). Pixels are scaled to `[0, 1]`;
/// standardize with a [`Standardizer`] fitted on the training split.
/// Gzipped files are not supported.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;
    let dims = read_idx_header(&img_bytes, images, IDX_IMAGES_MAGIC, 3)?;
    let ldims = read_idx_header(&lbl_bytes, labels, IDX_LABELS_MAGIC, 1)?;
    let (n, d) = (dims[0], dims[1] * dims[2]);
    if n != ldims[0] {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let pixels = &img_bytes[16..16 + n * d];
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let label_vec: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let classes = label_vec.iter().max().map_or(0, |&m| m + 1).max(2);

    let mut hasher = Sha256::new();
    hasher.update(&img_bytes);
    hasher.update(&lbl_bytes);
    let provenance = format!("idx:{}", &hex::encode(hasher.finalize())[..16]);
    Dataset::new(Tensor::matrix(n, d, data)?, label_vec, classes, provenance)
}

/// Writes `n` images of `rows × cols` unsigned bytes in IDX format.
pub fn write_idx_images(w: &mut impl Write, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for e in [n, rows, cols] {
        w.write_u32::<BigEndian>(e as u32)?;
    }
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(w: &mut impl Write, labels: &[u8]) -> Result<()> {
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

/// Splits `n` into per-class quotas proportional to `counts`
/// (largest-remainder rounding, so quotas sum to `n`).
fn proportional_quotas(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * n as f64 / total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - quotas.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            remaining -= 1;
        }
    }
    quotas
}

/// Class-stratified sample of `n` items (all items when `n ≥ len`).
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Dataset {
    let n = n.min(ds.len());
    let quotas = proportional_quotas(&ds.class_counts(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(n);
    for (mut idx, q) in ds.indices_by_class().into_iter().zip(quotas) {
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..q]);
    }
    keep.sort_unstable();
    ds.subset(&keep)
}

/// Class-stratified split; `train_fraction` of each class goes to the first
/// dataset. The two index sets are disjoint and exhaustive.
pub fn train_test_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, train_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn split_indices(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut idx in ds.indices_by_class() {
        let cut = (train_fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics of `train`; dimensions with zero variance keep unit scale.
    pub fn fit(train: &Dataset) -> Self {
        let d = train.dim();
        let n = train.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in 0..train.len() {
            for (m, v) in mean.iter_mut().zip(train.features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(train.features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = ds.dim();
        for row in ds.features.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Train/test pair standardized with training statistics.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn standardized(mut train: Dataset, mut test: Dataset) -> Self {
        let stats = Standardizer::fit(&train);
        stats.apply(&mut train);
        stats.apply(&mut test);
        Self { train, test }
    }
}
