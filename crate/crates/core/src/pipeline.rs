//! End-to-end runs: load data, train with pruning, write artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use crate::checkpoint::{load_sparse, save_sparse};
use crate::config::RunConfig;
use crate::data::{load_dir, split_and_batch, DatasetSplit, EpochBatches, IdxNames, Provenance};
use crate::metrics::{evaluate_accuracy, sparsity_report, SparsityReport};
use crate::model::{LenetVariant, ModelSpec, ParamStore};
use crate::optim::OptimizerState;
use crate::pruning::{format_log, run_schedule, Progress, ScheduleOutcome, TrainingData};

pub const CHECKPOINT_FILE: &str = "final.sprs";
pub const PRUNE_LOG_FILE: &str = "prune_events.tsv";
pub const METRICS_LOG_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub batches: EpochBatches,
}

pub fn load_datasets(data_dir: &Path, val_size: usize, batch_size: usize, seed: u64) -> Result<Datasets> {
    let full = load_dir(data_dir, &IdxNames::train(), Provenance::Train)?;
    let test = load_dir(data_dir, &IdxNames::test(), Provenance::Test)?;
    let (train, val, batches) = split_and_batch(&full, val_size, batch_size, seed)?;
    Ok(Datasets {
        train,
        val,
        test,
        batches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
}

impl FromStr for SplitChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// Loads one split; `train` and `val` are carved with `seed` and `val_size`.
pub fn load_split(data_dir: &Path, split: SplitChoice, seed: u64, val_size: usize) -> Result<DatasetSplit> {
    if split == SplitChoice::Test {
        return Ok(load_dir(data_dir, &IdxNames::test(), Provenance::Test)?);
    }
    let full = load_dir(data_dir, &IdxNames::train(), Provenance::Train)?;
    let (train, val, _) = split_and_batch(&full, val_size, 1, seed)?;
    Ok(if split == SplitChoice::Train { train } else { val })
}

/// The LeNet variant whose architecture fingerprint equals `hash`.
pub fn variant_for_hash(hash: u64) -> Option<LenetVariant> {
    [LenetVariant::Caffe431k, LenetVariant::Classic62k]
        .into_iter()
        .find(|&v| ModelSpec::lenet(v, 0).fingerprint() == hash)
}

/// Loads a checkpoint together with the architecture it was saved for.
pub fn load_model(path: &Path) -> Result<(ModelSpec, ParamStore)> {
    let (hash, store) = load_sparse(path, None).with_context(|| format!("loading {}", path.display()))?;
    let Some(variant) = variant_for_hash(hash) else {
        bail!(
            "{}: checkpoint does not belong to a known LeNet variant",
            path.display()
        );
    };
    let spec = ModelSpec::lenet(variant, 0);
    for p in spec.param_shapes() {
        match store.get(&p.name) {
            Some(e) if e.value().shape() == p.shape.as_slice() => {}
            _ => bail!("{}: parameter `{}` missing or misshapen", path.display(), p.name),
        }
    }
    Ok((spec, store))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: ScheduleOutcome,
    pub report: SparsityReport,
    pub test_accuracy: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_bytes: usize,
}

/// Trains `cfg` on already loaded data and writes every artifact under
/// `cfg.output_dir`. `observer` sees the same progress stream as the logs.
pub fn train_with(
    cfg: &RunConfig,
    data: &Datasets,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<(ParamStore, TrainSummary)> {
    cfg.validate()?;
    let spec = ModelSpec::lenet(cfg.variant, cfg.seed);
    let mut store = match &cfg.init_checkpoint {
        Some(path) => {
            load_sparse(path, Some(spec.fingerprint()))
                .with_context(|| format!("loading initial weights from {}", path.display()))?
                .1
        }
        None => spec.init_params(),
    };
    let mut optimizer = OptimizerState::new(cfg.optimizer, &store);

    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_string())?;
    let metrics_path = out.join(METRICS_LOG_FILE);
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut write_err = None;

    log::info!(
        "training {} on {} examples ({} validation), {} parameters",
        spec.name,
        data.train.len(),
        data.val.len(),
        store.total_params()
    );
    let outcome = run_schedule(
        &spec,
        &mut store,
        TrainingData {
            train: &data.train,
            val: &data.val,
            batches: &data.batches,
        },
        &cfg.reg_config(),
        &mut optimizer,
        &cfg.controller_config(),
        &mut |p| {
            if let Progress::Check { phase, record, .. } = &p {
                log::info!(
                    "{phase:?} step {} val {:.2}% pruned {} sparsity {:.2}%",
                    record.step,
                    record.val_accuracy,
                    record.num_pruned,
                    record.sparsity_percent
                );
                if let Err(e) = writeln!(metrics, "{record}").and_then(|_| metrics.flush()) {
                    write_err.get_or_insert(e);
                }
            }
            observer(p);
        },
    )?;
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", metrics_path.display()));
    }

    let test_accuracy = evaluate_accuracy(&spec, &store, &data.test)?;
    let report = sparsity_report(&store)?;
    fs::write(out.join(PRUNE_LOG_FILE), format_log(&outcome.state.prune_events))?;
    let mut report_text = report.to_string();
    report_text.push_str(&format!("test_accuracy\t{test_accuracy:.2}\n"));
    if let Some(v) = outcome.state.last_val_accuracy {
        report_text.push_str(&format!("val_accuracy\t{v:.2}\n"));
    }
    report_text.push_str(&format!("prune_events\t{}\n", outcome.state.prune_events.len()));
    report_text.push_str(&format!("steps\t{}\n", outcome.state.global_step));
    fs::write(out.join(REPORT_FILE), report_text)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let checkpoint_bytes = save_sparse(&store, spec.fingerprint(), &checkpoint)?;
    log::info!(
        "done: test accuracy {test_accuracy:.2}%, sparsity {:.2}%, compression {:.1}x",
        report.sparsity_percent,
        report.compression_ratio
    );
    Ok((
        store,
        TrainSummary {
            outcome,
            report,
            test_accuracy,
            checkpoint,
            checkpoint_bytes,
        },
    ))
}

/// Loads the configured data, then trains. Nothing is written if loading fails.
pub fn train(cfg: &RunConfig) -> Result<(ParamStore, TrainSummary)> {
    let data = load_datasets(&cfg.data_dir, cfg.val_size, cfg.batch_size, cfg.seed)
        .with_context(|| format!("loading data from {}", cfg.data_dir.display()))?;
    train_with(cfg, &data, &mut |_| {})
}
