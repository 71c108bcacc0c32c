//! Validation-gated global magnitude pruning and the training schedule
//! around it.

use std::fmt;

use crate::data::{Batch, DatasetSplit, EpochBatches};
use crate::metrics::{evaluate_accuracy, sparsity_percent, MetricsError};
use crate::model::{ModelError, ModelSpec, ParamStore};
use crate::optim::{OptimError, OptimizerState};
use crate::regularizer::{lambda_effective, reg_gradients, LambdaState, RegConfig, RegError, RegMode};

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("no unmasked prunable weights left")]
    EmptyPool,
    #[error("pruning percentage must lie in (0, 1), got {0}")]
    Percentage(f64),
    #[error("invalid controller setting: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f32 },
    #[error("training split is empty")]
    NoTrainingData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Reg(#[from] RegError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Training steps between validation checks.
    pub eval_interval: u64,
    /// Validation accuracy threshold in percent.
    pub lower_bound: f64,
    pub pruning_percentage: f64,
    /// Consecutive skipped checks that end the prune phase.
    pub plateau_patience: u32,
    pub finetune_epochs: usize,
    pub max_epochs: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            eval_interval: 250,
            lower_bound: 98.7,
            pruning_percentage: 0.04,
            plateau_patience: 20,
            finetune_epochs: 5,
            max_epochs: 120,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.pruning_percentage > 0.0 && self.pruning_percentage < 1.0) {
            return Err(PruneError::Percentage(self.pruning_percentage));
        }
        if self.eval_interval == 0 {
            return Err(PruneError::Config("eval_interval must be at least 1".into()));
        }
        if self.plateau_patience == 0 {
            return Err(PruneError::Config("plateau_patience must be at least 1".into()));
        }
        if !self.lower_bound.is_finite() {
            return Err(PruneError::Config("lower_bound must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Prune,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prune,
    Finetune,
}

/// One validation check; `num_pruned > 0` marks a prune event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub num_pruned: usize,
    /// Unmasked parameters (weights and biases) after the check.
    pub remaining: usize,
    pub sparsity_percent: f64,
    pub val_accuracy: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.4}\t{:.2}",
            self.step, self.num_pruned, self.remaining, self.sparsity_percent, self.val_accuracy
        )
    }
}

/// Tab-separated lines, one record per line.
pub fn format_log(records: &[LogRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerState {
    pub global_step: u64,
    pub last_val_accuracy: Option<f64>,
    pub failed_checks: u32,
    pub prune_events: Vec<LogRecord>,
    /// Every check, including skips and finetune checks.
    pub history: Vec<LogRecord>,
}

impl ControllerState {
    pub fn lambda_state(&self) -> LambdaState {
        LambdaState {
            failed_checks: self.failed_checks,
        }
    }
}

/// Prunes iff `val_accuracy > lower_bound`; a skip counts as a failed check.
pub fn validation_check(val_accuracy: f64, config: &ControllerConfig, state: &mut ControllerState) -> Decision {
    state.last_val_accuracy = Some(val_accuracy);
    if val_accuracy > config.lower_bound {
        state.failed_checks = 0;
        Decision::Prune
    } else {
        state.failed_checks += 1;
        Decision::Skip
    }
}

/// `ceil(p · remaining)`, treating products within rounding noise of an
/// integer as that integer.
pub fn prune_count(p: f64, remaining: usize) -> usize {
    let x = p * remaining as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, remaining)
}

/// Masks the `ceil(p · remaining)` smallest-magnitude unmasked prunable
/// weights across all layers. Ties go to the earlier layer, then the lower
/// flat index.
pub fn global_magnitude_prune(store: &mut ParamStore, p: f64) -> Result<usize, PruneError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PruneError::Percentage(p));
    }
    let names: Vec<String> = store.prunable_names().map(str::to_string).collect();
    let mut pool: Vec<(f32, u32, u32)> = Vec::with_capacity(store.prunable_remaining());
    for (layer, name) in names.iter().enumerate() {
        let entry = store.get(name).expect("listed name");
        for (i, (&w, &live)) in entry.value().data().iter().zip(entry.mask().bits()).enumerate() {
            if live {
                pool.push((w.abs(), layer as u32, i as u32));
            }
        }
    }
    if pool.is_empty() {
        return Err(PruneError::EmptyPool);
    }
    let k = prune_count(p, pool.len());
    let order = |a: &(f32, u32, u32), b: &(f32, u32, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, order);
    }
    for &(_, layer, idx) in &pool[..k] {
        store.prune_at(&names[layer as usize], idx as usize)?;
    }
    Ok(k)
}

/// Forward, backward, penalty and one optimizer update on a batch. Returns
/// the task loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    spec: &ModelSpec,
    store: &mut ParamStore,
    optimizer: &mut OptimizerState,
    batch: Batch,
    mode: RegMode,
    lambda: f32,
    eta: f32,
    step: u64,
) -> Result<f32, PruneError> {
    let (loss, grads) = spec.loss_and_grads(store, batch.images, &batch.labels)?;
    if !loss.is_finite() {
        return Err(PruneError::NonFinite { step, loss });
    }
    let grads = grads.into_params();
    let reg = reg_gradients(mode, lambda, store, &grads);
    optimizer.step(store, &grads, &reg, eta)?;
    Ok(loss)
}

/// What the schedule reports to an observer.
#[derive(Debug)]
pub enum Progress<'a> {
    /// After an optimizer update.
    Step {
        phase: Phase,
        step: u64,
        loss: f32,
        store: &'a ParamStore,
    },
    /// After a validation check and any pruning it triggered.
    Check {
        phase: Phase,
        record: &'a LogRecord,
        store: &'a ParamStore,
    },
}

#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub train: &'a DatasetSplit,
    pub val: &'a DatasetSplit,
    pub batches: &'a EpochBatches,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    pub state: ControllerState,
    /// Epochs spent in the prune phase (a partial epoch counts as one).
    pub prune_epochs: usize,
    pub plateaued: bool,
}

fn record(store: &ParamStore, step: u64, num_pruned: usize, val_accuracy: f64) -> LogRecord {
    let total = store.total_params();
    let remaining = store.remaining();
    LogRecord {
        step,
        num_pruned,
        remaining,
        sparsity_percent: sparsity_percent(total, remaining),
        val_accuracy,
    }
}

/// Regularized training with gated pruning until a plateau or `max_epochs`,
/// then `finetune_epochs` without the penalty. `store` is updated in place.
pub fn run_schedule(
    spec: &ModelSpec,
    store: &mut ParamStore,
    data: TrainingData<'_>,
    reg: &RegConfig,
    optimizer: &mut OptimizerState,
    controller: &ControllerConfig,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<ScheduleOutcome, PruneError> {
    reg.validate()?;
    controller.validate()?;
    if data.train.is_empty() {
        return Err(PruneError::NoTrainingData);
    }
    let mut state = ControllerState::default();
    let mut epoch = 0;
    let mut plateaued = false;

    'prune: while epoch < controller.max_epochs {
        epoch += 1;
        for batch in data.batches.epoch(data.train, epoch - 1) {
            let lambda = lambda_effective(reg, &state.lambda_state());
            let step = state.global_step + 1;
            let loss = train_step(spec, store, optimizer, batch, reg.mode, lambda, reg.eta, step)?;
            state.global_step = step;
            observer(Progress::Step {
                phase: Phase::Prune,
                step,
                loss,
                store,
            });
            if step % controller.eval_interval != 0 {
                continue;
            }
            let acc = evaluate_accuracy(spec, store, data.val)?;
            let mut num_pruned = 0;
            if validation_check(acc, controller, &mut state) == Decision::Prune {
                if store.prunable_remaining() == 0 {
                    plateaued = true;
                } else {
                    num_pruned = global_magnitude_prune(store, controller.pruning_percentage)?;
                }
            }
            let rec = record(store, step, num_pruned, acc);
            if num_pruned > 0 {
                state.prune_events.push(rec);
            }
            state.history.push(rec);
            observer(Progress::Check {
                phase: Phase::Prune,
                record: &rec,
                store,
            });
            if state.failed_checks >= controller.plateau_patience {
                plateaued = true;
            }
            if plateaued {
                break 'prune;
            }
        }
    }
    let prune_epochs = epoch;

    for e in 0..controller.finetune_epochs {
        for batch in data.batches.epoch(data.train, prune_epochs + e) {
            let step = state.global_step + 1;
            let loss = train_step(spec, store, optimizer, batch, RegMode::None, 0.0, reg.eta, step)?;
            state.global_step = step;
            observer(Progress::Step {
                phase: Phase::Finetune,
                step,
                loss,
                store,
            });
            if step % controller.eval_interval == 0 {
                let acc = evaluate_accuracy(spec, store, data.val)?;
                state.last_val_accuracy = Some(acc);
                let rec = record(store, step, 0, acc);
                state.history.push(rec);
                observer(Progress::Check {
                    phase: Phase::Finetune,
                    record: &rec,
                    store,
                });
            }
        }
    }

    Ok(ScheduleOutcome {
        state,
        prune_epochs,
        plateaued,
    })
}
