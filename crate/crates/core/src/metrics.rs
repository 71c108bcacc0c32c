//! Accuracy, sparsity accounting, histograms and seed statistics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::data::DatasetSplit;
use crate::model::{ModelError, ModelSpec, ParamStore};
use crate::regularizer::IrrelevanceMap;

/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 500;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("no unmasked parameters remain")]
    NothingRemaining,
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("bins must be at least 1")]
    Bins,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of examples whose argmax logit equals the label.
pub fn evaluate_accuracy(spec: &ModelSpec, store: &ParamStore, split: &DatasetSplit) -> Result<f64, MetricsError> {
    if split.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let mut correct = 0usize;
    for batch in split.batches(EVAL_BATCH) {
        let logits = spec.logits(store, batch.images)?;
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

pub fn sparsity_percent(total: usize, remaining: usize) -> f64 {
    100.0 * (total - remaining) as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub total_params: usize,
    pub remaining: usize,
    pub sparsity_percent: f64,
    pub compression_ratio: f64,
    /// Residual percentage of each prunable tensor.
    pub per_layer: IndexMap<String, f64>,
}

pub fn sparsity_report(store: &ParamStore) -> Result<SparsityReport, MetricsError> {
    let total = store.total_params();
    let remaining = store.remaining();
    if remaining == 0 {
        return Err(MetricsError::NothingRemaining);
    }
    let per_layer = store
        .iter()
        .filter(|(_, e)| e.prunable())
        .map(|(name, e)| (name.to_string(), 100.0 * e.remaining() as f64 / e.value().len() as f64))
        .collect();
    Ok(SparsityReport {
        total_params: total,
        remaining,
        sparsity_percent: sparsity_percent(total, remaining),
        compression_ratio: total as f64 / remaining as f64,
        per_layer,
    })
}

impl fmt::Display for SparsityReport {
    /// One `key<TAB>value` pair per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total_params\t{}", self.total_params)?;
        writeln!(f, "remaining\t{}", self.remaining)?;
        writeln!(f, "sparsity_percent\t{:.4}", self.sparsity_percent)?;
        writeln!(f, "compression_ratio\t{:.2}", self.compression_ratio)?;
        for (name, residual) in &self.per_layer {
            writeln!(f, "residual_percent.{name}\t{residual:.4}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width bins over `[lo, hi]`; values equal to `hi` land in the last bin,
/// values outside the range are clamped into the end bins.
pub fn histogram(
    values: impl IntoIterator<Item = f64>,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<Vec<HistBin>, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::Bins);
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            left: lo + width * i as f64,
            right: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for v in values {
        let idx = if width > 0.0 {
            (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        out[idx].count += 1;
    }
    Ok(out)
}

pub fn histogram_csv(bins: &[HistBin]) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.left, b.right, b.count));
    }
    s
}

/// Finds the weight tensor of `layer`, ignoring ASCII case.
pub fn resolve_layer<'a>(store: &'a ParamStore, layer: &str) -> Result<&'a str, MetricsError> {
    store
        .prunable_names()
        .find(|n| n.eq_ignore_ascii_case(layer))
        .ok_or_else(|| MetricsError::UnknownLayer(layer.to_string()))
}

/// Irrelevance and weight-magnitude histograms of one layer's unmasked weights.
pub fn layer_histograms(
    store: &ParamStore,
    irr: &IrrelevanceMap,
    layer: &str,
    bins: usize,
) -> Result<(Vec<HistBin>, Vec<HistBin>), MetricsError> {
    let name = resolve_layer(store, layer)?;
    let entry = store.get(name).expect("resolved name");
    let coeffs = irr
        .get(name)
        .ok_or_else(|| MetricsError::UnknownLayer(layer.to_string()))?;
    let live: Vec<usize> = (0..entry.value().len()).filter(|&i| entry.mask().get(i)).collect();
    let irr_hist = histogram(live.iter().map(|&i| coeffs.data()[i] as f64), 0.0, 1.0, bins)?;
    let mags: Vec<f64> = live.iter().map(|&i| entry.value().data()[i].abs() as f64).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let norm_hist = histogram(mags, 0.0, max, bins)?;
    Ok((irr_hist, norm_hist))
}

/// Writes `<layer>_irrelevance.csv` and `<layer>_weight_norm.csv` into `dir`.
pub fn export_histograms(
    store: &ParamStore,
    irr: &IrrelevanceMap,
    layer: &str,
    bins: usize,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), MetricsError> {
    let (irr_hist, norm_hist) = layer_histograms(store, irr, layer, bins)?;
    let name = resolve_layer(store, layer)?;
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let irr_path = dir.join(format!("{name}_irrelevance.csv"));
    let norm_path = dir.join(format!("{name}_weight_norm.csv"));
    for (path, hist) in [(&irr_path, &irr_hist), (&norm_path, &norm_hist)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(histogram_csv(hist).as_bytes()))
            .map_err(|source| MetricsError::Io {
                path: path.clone(),
                source,
            })?;
    }
    Ok((irr_path, norm_path))
}

/// Mean and unbiased sample variance; variance is 0 for a single value.
pub fn mean_variance(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var))
}
