//! IDX loading (raw or gzip), train/validation split and batching.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    WrongMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("validation size {val_size} must be smaller than the {total} available examples")]
    ValSize { val_size: usize, total: usize },
    #[error("no {0} files found in {1}")]
    Missing(&'static str, PathBuf),
}

/// Which partition a [`DatasetSplit`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Val,
    Test,
}

/// Images normalized to `[0, 1]` as `[N, 1, rows, cols]` plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.images.len() / self.labels.len().max(1)
    }

    /// Copies the examples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let stride = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            images: Tensor::new(shape, data).expect("gathered batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in storage order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let n = self.len();
        (0..n)
            .step_by(batch_size.max(1))
            .map(move |start| self.gather(&(start..(start + batch_size).min(n)).collect::<Vec<_>>()))
    }

    fn subset(&self, indices: &[usize], provenance: Provenance) -> Self {
        let b = self.gather(indices);
        Self {
            images: b.images,
            labels: b.labels,
            provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn open_maybe_gzip(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(io)?)
        .read_to_end(&mut raw)
        .map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::WrongMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} pixel bytes for {n}×{rows}×{cols}", body.len()),
        });
    }
    Ok((n, rows, cols, body[..n * rows * cols].to_vec()))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::WrongMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} label bytes for {n} labels", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Parses an IDX image/label file pair; pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path, provenance: Provenance) -> Result<DatasetSplit, DataError> {
    let (n, rows, cols, pixels) = parse_images(&open_maybe_gzip(images)?, images)?;
    let label_bytes = parse_labels(&open_maybe_gzip(labels)?, labels)?;
    if label_bytes.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: label_bytes.len(),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Truncated {
            path: images.to_path_buf(),
            detail: "empty dataset".into(),
        });
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(DatasetSplit {
        images: Tensor::new(vec![n, 1, rows, cols], data).expect("IDX dims"),
        labels: label_bytes.into_iter().map(usize::from).collect(),
        provenance,
    })
}

/// File names of one IDX image/label pair inside a data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxNames {
    pub images: String,
    pub labels: String,
}

impl IdxNames {
    pub fn train() -> Self {
        Self {
            images: "train-images-idx3-ubyte".into(),
            labels: "train-labels-idx1-ubyte".into(),
        }
    }

    pub fn test() -> Self {
        Self {
            images: "t10k-images-idx3-ubyte".into(),
            labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

fn resolve(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

/// Loads an image/label pair from `dir`, accepting raw or `.gz` files.
pub fn load_dir(dir: &Path, names: &IdxNames, provenance: Provenance) -> Result<DatasetSplit, DataError> {
    let what = match provenance {
        Provenance::Test => "test",
        _ => "training",
    };
    let images = resolve(dir, &names.images).ok_or_else(|| DataError::Missing(what, dir.to_path_buf()))?;
    let labels = resolve(dir, &names.labels).ok_or_else(|| DataError::Missing(what, dir.to_path_buf()))?;
    load_idx(&images, &labels, provenance)
}

/// Per-epoch shuffled batching over the training split.
#[derive(Debug, Clone)]
pub struct EpochBatches {
    batch_size: usize,
    seed: u64,
}

impl EpochBatches {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::BatchSize);
        }
        Ok(Self { batch_size, seed })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Example order of one epoch; depends only on the seed and epoch index.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch<'a>(&self, split: &'a DatasetSplit, epoch: usize) -> impl Iterator<Item = Batch> + 'a {
        let order = self.order(split.len(), epoch);
        let bs = self.batch_size;
        (0..split.len())
            .step_by(bs)
            .map(move |start| split.gather(&order[start..(start + bs).min(order.len())]))
    }
}

/// Shuffles once with `seed`, keeps the last `val_size` examples for
/// validation and the rest for training.
pub fn split_and_batch(
    raw: &DatasetSplit,
    val_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit, EpochBatches), DataError> {
    let batches = EpochBatches::new(batch_size, seed)?;
    if val_size >= raw.len() {
        return Err(DataError::ValSize {
            val_size,
            total: raw.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut rng);
    let cut = raw.len() - val_size;
    let train = raw.subset(&order[..cut], Provenance::Train);
    let val = raw.subset(&order[cut..], Provenance::Val);
    Ok((train, val, batches))
}
