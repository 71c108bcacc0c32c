//! SGD and Adam steps over a masked [`ParamStore`].
//!
//! The penalty gradient is added to the task gradient before the optimizer
//! sees it, so for Adam it flows through both moment estimates. Per-element
//! arithmetic runs in `f64` and is rounded to `f32` once on write-back.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::model::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("unknown optimizer `{0}` (expected sgd or adam)")]
    UnknownKind(String),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(OptimError::UnknownKind(s.to_string())),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Feed the penalty through the moments instead of applying it as a plain step.
    pub penalty_in_moments: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            penalty_in_moments: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    adam: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        Self::with_adam_config(kind, AdamConfig::default(), store)
    }

    pub fn with_adam_config(kind: OptimizerKind, adam: AdamConfig, store: &ParamStore) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => IndexMap::new(),
            OptimizerKind::Adam => store
                .iter()
                .map(|(name, e)| {
                    let n = e.value().len();
                    (
                        name.to_string(),
                        Moments {
                            first: vec![0.0; n],
                            second: vec![0.0; n],
                        },
                    )
                })
                .collect(),
        };
        Self {
            kind,
            adam,
            step: 0,
            moments,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment of a parameter (Adam only).
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|m| (m.first.as_slice(), m.second.as_slice()))
    }

    /// Applies one update with the configured optimizer.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        reg_grads: &IndexMap<String, Tensor<f64>>,
        eta: f32,
    ) -> Result<(), OptimError> {
        match self.kind {
            OptimizerKind::Sgd => {
                self.step += 1;
                sgd_step(store, grads, reg_grads, eta)
            }
            OptimizerKind::Adam => adam_step(store, grads, reg_grads, self, eta),
        }
    }
}

fn check_shape<E: Element>(name: &str, t: Option<&Tensor<E>>, expected: &[usize]) -> Result<(), OptimError> {
    match t {
        Some(t) if t.shape() != expected => Err(OptimError::Shape {
            name: name.to_string(),
            got: t.shape().to_vec(),
            expected: expected.to_vec(),
        }),
        _ => Ok(()),
    }
}

/// `w ← w − η·(grad + reg)` at every unmasked position.
///
/// Parameters without an entry in `grads` are left untouched; a missing
/// `reg_grads` entry counts as zero.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    reg_grads: &IndexMap<String, Tensor<f64>>,
    eta: f32,
) -> Result<(), OptimError> {
    let eta = eta as f64;
    for (name, entry) in store.iter_mut() {
        let Some(grad) = grads.get(name) else { continue };
        let reg = reg_grads.get(name);
        let shape = entry.value().shape().to_vec();
        check_shape(name, Some(grad), &shape)?;
        check_shape(name, reg, &shape)?;
        let mask = entry.mask().clone();
        let w = entry.value_mut().data_mut();
        for i in 0..w.len() {
            if !mask.get(i) {
                w[i] = 0.0;
                continue;
            }
            let r = reg.map_or(0.0, |r| r.data()[i]);
            w[i] = (w[i] as f64 - eta * (grad.data()[i] as f64 + r)) as f32;
        }
    }
    Ok(())
}

/// Bias-corrected Adam on `grad`, with the penalty applied as a separate
/// `η·reg` step: `w ← w − η·m̂/(√v̂ + eps) − η·reg`. With
/// `penalty_in_moments` the moments see `grad + reg` instead.
///
/// Masked positions keep a zero value and zero moments.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    reg_grads: &IndexMap<String, Tensor<f64>>,
    state: &mut OptimizerState,
    eta: f32,
) -> Result<(), OptimError> {
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        penalty_in_moments,
    } = state.adam;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);
    let eta = eta as f64;
    for (name, entry) in store.iter_mut() {
        let Some(grad) = grads.get(name) else { continue };
        let reg = reg_grads.get(name);
        let shape = entry.value().shape().to_vec();
        check_shape(name, Some(grad), &shape)?;
        check_shape(name, reg, &shape)?;
        let n = entry.value().len();
        let moments = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        });
        let mask = entry.mask().clone();
        let w = entry.value_mut().data_mut();
        for i in 0..n {
            if !mask.get(i) {
                w[i] = 0.0;
                moments.first[i] = 0.0;
                moments.second[i] = 0.0;
                continue;
            }
            let r = reg.map_or(0.0, |r| r.data()[i]);
            let (g, plain) = if penalty_in_moments {
                (grad.data()[i] as f64 + r, 0.0)
            } else {
                (grad.data()[i] as f64, r)
            };
            let m = beta1 * moments.first[i] + (1.0 - beta1) * g;
            let v = beta2 * moments.second[i] + (1.0 - beta2) * g * g;
            moments.first[i] = m;
            moments.second[i] = v;
            let update = eta * (m / correct1) / ((v / correct2).sqrt() + eps) + eta * plain;
            w[i] = (w[i] as f64 - update) as f32;
        }
    }
    Ok(())
}
