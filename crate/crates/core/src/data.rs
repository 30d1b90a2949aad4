//! Datasets, non-iid partitioning and seeded minibatch iteration.
//!
//! Sources: MNIST IDX files (big-endian), synthetic Gaussian mixtures, and a
//! small flat binary format for dumping/loading synthetic sets. Partitioning
//! follows the per-class Dirichlet allocation: for every class, worker
//! proportions are drawn from Dirichlet(omega * 1_N) and the class's
//! shuffled indices are split by largest-remainder apportionment, so the
//! shards are pairwise disjoint and cover every index exactly once.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use thiserror::Error;

use crate::rng::{derive, rng_from, TAG_BATCH, TAG_PARTITION, TAG_SYNTH};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const GMLB_MAGIC: &[u8; 4] = b"GMLB";
const GMLB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: bad IDX magic {got:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated IDX file ({got} bytes, expected {expected})")]
    IdxTruncated {
        path: String,
        got: usize,
        expected: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("bad GMLB magic")]
    GmlbMagic,
    #[error("unsupported GMLB version {0}")]
    GmlbVersion(u32),
    #[error("truncated GMLB file")]
    GmlbTruncated,
    #[error("dataset must contain at least one sample")]
    EmptyDataset,
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("batch_iter called on an empty shard")]
    EmptyShard,
    #[error("shard index {0} out of bounds")]
    BadIndex(usize),
    #[error("invalid partition argument: {0}")]
    BadPartitionArg(&'static str),
}

/// Immutable sample store; features are row-major `n x dim`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.nrows() == 0 || features.nrows() != labels.len() {
            return Err(DataError::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::BadLabel {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Copy the given rows out into an owned batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Batch, DataError> {
        let mut features = Array2::zeros((idx.len(), self.dim()));
        let mut labels = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= self.len() {
                return Err(DataError::BadIndex(i));
            }
            features.row_mut(r).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Batch { features, labels })
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// One minibatch; `features` is `n x input_dim`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint, exhaustive index shards over a parent dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub omega: f64,
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_idx_header(
    bytes: &[u8],
    path: &Path,
    expected_magic: u32,
    header_len: usize,
) -> Result<(), DataError> {
    if bytes.len() < header_len {
        return Err(DataError::IdxTruncated {
            path: path.display().to_string(),
            got: bytes.len(),
            expected: header_len,
        });
    }
    let got = read_u32_be(bytes, 0);
    if got != expected_magic {
        return Err(DataError::IdxMagic {
            path: path.display().to_string(),
            got,
            expected: expected_magic,
        });
    }
    Ok(())
}

/// Load an MNIST-style pair of IDX files. Pixels are scaled to `[0, 1]`;
/// the image and label counts are cross-checked.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = fs::read(images_path)?;
    check_idx_header(&img, images_path, IDX_IMAGES_MAGIC, 16)?;
    let n = read_u32_be(&img, 4) as usize;
    let rows = read_u32_be(&img, 8) as usize;
    let cols = read_u32_be(&img, 12) as usize;
    let dim = rows * cols;
    let expected = 16 + n * dim;
    if img.len() < expected {
        return Err(DataError::IdxTruncated {
            path: images_path.display().to_string(),
            got: img.len(),
            expected,
        });
    }

    let lab = fs::read(labels_path)?;
    check_idx_header(&lab, labels_path, IDX_LABELS_MAGIC, 8)?;
    let n_lab = read_u32_be(&lab, 4) as usize;
    let expected_lab = 8 + n_lab;
    if lab.len() < expected_lab {
        return Err(DataError::IdxTruncated {
            path: labels_path.display().to_string(),
            got: lab.len(),
            expected: expected_lab,
        });
    }
    if n != n_lab {
        return Err(DataError::IdxCountMismatch {
            images: n,
            labels: n_lab,
        });
    }

    let mut features = Array2::zeros((n, dim));
    for i in 0..n {
        let row = &img[16 + i * dim..16 + (i + 1) * dim];
        for (j, &px) in row.iter().enumerate() {
            features[(i, j)] = px as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, num_classes)
}

/// Gaussian-mixture substitute for desk-scale experiments: class means are
/// uniform in `[-2, 2]^dim`, samples are `N(mean, 0.5 I)`.
pub fn gen_synthetic(num_classes: usize, dim: usize, n_per_class: usize, seed: u64) -> Dataset {
    assert!(num_classes >= 1 && dim >= 1 && n_per_class >= 1);
    let mut rng = rng_from(derive(seed, &[TAG_SYNTH]));
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let n = num_classes * n_per_class;
    let std = 0.5f64.sqrt();
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for (j, &m) in mean.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[(row, j)] = m + std * z;
            }
            labels.push(k);
            row += 1;
        }
    }
    Dataset::new(features, labels, num_classes).expect("synthetic dataset is well-formed")
}

/// Largest-remainder apportionment of `total` items across proportions `q`,
/// so the per-worker counts always sum to `total` exactly.
fn apportion(q: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = q
        .iter()
        .map(|&p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = q[a] * total as f64 - (q[a] * total as f64).floor();
        let fb = q[b] * total as f64 - (q[b] * total as f64).floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &w in order.iter().take(total.saturating_sub(assigned)) {
        counts[w] += 1;
    }
    counts
}

/// Per-class Dirichlet split of the dataset across `n_workers` shards.
/// Deterministic given `seed`; empty shards are possible at small `omega`
/// and must be tolerated downstream.
pub fn dirichlet_partition(
    dataset: &Dataset,
    n_workers: usize,
    omega: f64,
    seed: u64,
) -> Result<Partition, DataError> {
    if n_workers < 1 {
        return Err(DataError::BadPartitionArg("n_workers must be >= 1"));
    }
    if omega.is_nan() || omega <= 0.0 {
        return Err(DataError::BadPartitionArg("omega must be > 0"));
    }
    let mut rng = rng_from(derive(seed, &[TAG_PARTITION]));
    let gamma = Gamma::new(omega, 1.0).expect("omega > 0");
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_workers];
    for mut class_idx in dataset.indices_by_class() {
        class_idx.shuffle(&mut rng);
        let mut q: Vec<f64> = (0..n_workers).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = q.iter().sum();
        if total > 0.0 {
            for v in q.iter_mut() {
                *v /= total;
            }
        } else {
            // all gamma draws underflowed; fall back to a uniform split
            q.fill(1.0 / n_workers as f64);
        }
        let counts = apportion(&q, class_idx.len());
        let mut cursor = 0;
        for (w, &c) in counts.iter().enumerate() {
            shards[w].extend_from_slice(&class_idx[cursor..cursor + c]);
            cursor += c;
        }
    }
    for shard in shards.iter_mut() {
        shard.sort_unstable();
    }
    Ok(Partition { shards, omega })
}

/// Deterministic minibatch for `(seed, step)`: shard indices are permuted
/// once per epoch with a counter-derived shuffle, the final partial batch is
/// kept, and iteration wraps across epochs.
pub fn batch_iter(
    dataset: &Dataset,
    shard: &[usize],
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Batch, DataError> {
    if shard.is_empty() {
        return Err(DataError::EmptyShard);
    }
    assert!(batch_size >= 1);
    let len = shard.len();
    let batches_per_epoch = len.div_ceil(batch_size) as u64;
    let epoch = step / batches_per_epoch;
    let pos = (step % batches_per_epoch) as usize;
    let mut perm = shard.to_vec();
    perm.shuffle(&mut rng_from(derive(seed, &[TAG_BATCH, epoch])));
    let lo = pos * batch_size;
    let hi = (lo + batch_size).min(len);
    dataset.gather(&perm[lo..hi])
}

/// Split a dataset into (train, test) by taking the first
/// `train_per_class` samples of every class in dataset order. Both halves
/// draw from the same distribution, which is what held-out evaluation needs.
pub fn split_per_class(
    dataset: &Dataset,
    train_per_class: usize,
) -> Result<(Dataset, Dataset), DataError> {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class_idx in dataset.indices_by_class() {
        if class_idx.len() <= train_per_class {
            return Err(DataError::BadPartitionArg(
                "every class needs more samples than train_per_class",
            ));
        }
        train_idx.extend_from_slice(&class_idx[..train_per_class]);
        test_idx.extend_from_slice(&class_idx[train_per_class..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let gathered_train = dataset.gather(&train_idx)?;
    let gathered_test = dataset.gather(&test_idx)?;
    Ok((
        Dataset::new(
            gathered_train.features,
            gathered_train.labels,
            dataset.num_classes,
        )?,
        Dataset::new(
            gathered_test.features,
            gathered_test.labels,
            dataset.num_classes,
        )?,
    ))
}

/// Mean entropy (nats) of the per-shard label distributions. Empty shards
/// contribute zero, the fully concentrated value.
pub fn mean_shard_label_entropy(dataset: &Dataset, partition: &Partition) -> f64 {
    let mut total = 0.0;
    for shard in &partition.shards {
        if shard.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; dataset.num_classes];
        for &i in shard {
            counts[dataset.labels[i]] += 1;
        }
        let n = shard.len() as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        total += h;
    }
    total / partition.shards.len() as f64
}

/// Dump a dataset as flat little-endian binary: 16-byte header
/// (magic "GMLB", version, n, dim), then `n * dim` f64 features and `n`
/// u32 labels.
pub fn save_gmlb(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(16 + dataset.len() * dataset.dim() * 8 + dataset.len() * 4);
    out.extend_from_slice(GMLB_MAGIC);
    out.extend_from_slice(&GMLB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    for v in dataset.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &dataset.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_gmlb(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(DataError::GmlbTruncated);
    }
    if &bytes[0..4] != GMLB_MAGIC {
        return Err(DataError::GmlbMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GMLB_VERSION {
        return Err(DataError::GmlbVersion(version));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + n * dim * 8 + n * 4;
    if bytes.len() < expected {
        return Err(DataError::GmlbTruncated);
    }
    let mut features = Array2::zeros((n, dim));
    let mut at = 16;
    for i in 0..n {
        for j in 0..dim {
            features[(i, j)] = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            at += 8;
        }
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
        at += 4;
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, num_classes)
}

/// Partition sanity: pairwise disjoint and exhaustive.
pub fn partition_is_exact(partition: &Partition, n: usize) -> bool {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for shard in &partition.shards {
        total += shard.len();
        for &i in shard {
            if !seen.insert(i) {
                return false;
            }
        }
    }
    total == n && seen.len() == n && seen.last().is_none_or(|&m| m < n)
}
