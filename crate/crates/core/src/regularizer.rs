//! Relevance-weighted weight decay.
//!
//! Each prunable weight `w` with task-loss gradient `g` carries a coefficient
//! of irrelevance `I = exp(-|g|)`. The penalty `λ Σ I·w²` pulls weights the
//! loss barely depends on (`I → 1`) towards zero at the plain weight-decay
//! rate while leaving strongly relevant weights (`I → 0`) to the task
//! gradient alone.
//!
//! `I` is treated as a constant when differentiating the penalty, so the
//! regularizer enters the update only as the explicit term `2λ·I·w`. The
//! second-order term that would come from differentiating `I` is dropped.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::model::{Mask, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegError {
    #[error("unknown regularization mode `{0}` (expected none, l1, l2 or relevance)")]
    UnknownMode(String),
    #[error("invalid regularization config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegMode {
    None,
    L1,
    L2,
    #[default]
    Relevance,
}

impl FromStr for RegMode {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "relevance" => Ok(Self::Relevance),
            other => Err(RegError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Relevance => "relevance",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub mode: RegMode,
    /// Base regularization strength λ.
    pub lambda0: f32,
    /// Multiplicative λ decay per failed validation check.
    pub decay_gamma: f32,
    /// Learning rate η.
    pub eta: f32,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            mode: RegMode::Relevance,
            lambda0: 1e-3,
            decay_gamma: 0.98,
            eta: 1e-3,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<(), RegError> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(RegError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda0
            )));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(RegError::InvalidConfig(format!(
                "decay_gamma must lie in (0, 1], got {}",
                self.decay_gamma
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(RegError::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// λ schedule bookkeeping: decays once per failed validation check and
/// resets whenever a prune happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LambdaState {
    pub failed_checks: u32,
}

impl LambdaState {
    pub fn record_skip(&mut self) {
        self.failed_checks += 1;
    }

    pub fn record_prune(&mut self) {
        self.failed_checks = 0;
    }
}

/// `lambda0 · decay_gamma^failed_checks`.
pub fn lambda_effective(config: &RegConfig, state: &LambdaState) -> f32 {
    (config.lambda0 as f64 * (config.decay_gamma as f64).powi(state.failed_checks as i32)) as f32
}

/// Elementwise `exp(-|g|)`, always in `(0, 1]` for finite `g`.
pub fn irrelevance(grad: &Tensor) -> Tensor {
    grad.map(|g| (-g.abs()).exp())
}

/// Irrelevance coefficients of every prunable parameter, keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IrrelevanceMap(IndexMap<String, Tensor>);

impl IrrelevanceMap {
    pub fn compute(store: &ParamStore, grads: &IndexMap<String, Tensor>) -> Self {
        Self(
            store
                .prunable_names()
                .filter_map(|name| grads.get(name).map(|g| (name.to_string(), irrelevance(g))))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// `task_loss + λ Σ I·w²` over unmasked prunable weights.
///
/// Reported for inspection only; the optimizer consumes [`reg_gradient`].
pub fn regularized_loss(task_loss: f32, store: &ParamStore, irr: &IrrelevanceMap, lambda: f32) -> f32 {
    let mut penalty = 0.0f64;
    for (name, entry) in store.iter().filter(|(_, e)| e.prunable()) {
        let Some(coeff) = irr.get(name) else { continue };
        for ((&w, &i), &keep) in entry.value().data().iter().zip(coeff.data()).zip(entry.mask().bits()) {
            if keep {
                penalty += i as f64 * (w as f64) * (w as f64);
            }
        }
    }
    (task_loss as f64 + lambda as f64 * penalty) as f32
}

/// Gradient contribution of the penalty term for one parameter.
///
/// * relevance: `2λ·exp(-|g|)·w`
/// * l2: `2λ·w`
/// * l1: `λ·sign(w)` with `sign(0) = 0`
/// * none: zeros
///
/// Masked positions are always zero.
/// Returned in f64 so the optimizer rounds the full update only once.
pub fn reg_gradient(mode: RegMode, lambda: f32, w: &Tensor, grad: &Tensor, mask: &Mask) -> Tensor<f64> {
    assert_eq!(w.shape(), grad.shape(), "reg_gradient: weight/gradient shape");
    assert_eq!(w.len(), mask.len(), "reg_gradient: mask length");
    let lam = lambda as f64;
    let data = w
        .data()
        .iter()
        .zip(grad.data())
        .zip(mask.bits())
        .map(|((&wv, &gv), &keep)| {
            if !keep {
                return 0.0;
            }
            let (wv, gv) = (wv as f64, gv as f64);
            match mode {
                RegMode::None => 0.0,
                RegMode::L1 => {
                    if wv > 0.0 {
                        lam
                    } else if wv < 0.0 {
                        -lam
                    } else {
                        0.0
                    }
                }
                RegMode::L2 => 2.0 * lam * wv,
                RegMode::Relevance => 2.0 * lam * (-gv.abs()).exp() * wv,
            }
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape as w")
}

/// Penalty gradients for every prunable parameter of `store`.
pub fn reg_gradients(
    mode: RegMode,
    lambda: f32,
    store: &ParamStore,
    grads: &IndexMap<String, Tensor>,
) -> IndexMap<String, Tensor<f64>> {
    store
        .iter()
        .filter(|(_, e)| e.prunable())
        .filter_map(|(name, e)| {
            grads
                .get(name)
                .map(|g| (name.to_string(), reg_gradient(mode, lambda, e.value(), g, e.mask())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tensor(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    fn reg1(mode: RegMode, lambda: f32, w: f32, g: f32) -> f64 {
        reg_gradient(mode, lambda, &scalar_tensor(w), &scalar_tensor(g), &Mask::ones(1)).data()[0]
    }

    #[test]
    fn irrelevance_reference_values() {
        let g = Tensor::new(vec![4], vec![0.0, std::f32::consts::LN_2, 1.0, -3.0]).unwrap();
        let i = irrelevance(&g);
        let expected = [1.0f32, 0.5, 0.367_879_44, 0.049_787_07];
        for (a, b) in i.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn regularized_loss_with_zero_lambda_is_task_loss() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap(), true)
            .unwrap();
        let grads: IndexMap<_, _> = [("w".to_string(), Tensor::zeros(&[1, 2]))].into();
        let irr = IrrelevanceMap::compute(&store, &grads);
        assert_eq!(regularized_loss(1.25, &store, &irr, 0.0), 1.25);
    }

    #[test]
    fn regularized_loss_single_weight() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap(), true)
            .unwrap();
        let grads: IndexMap<_, _> = [("w".to_string(), Tensor::zeros(&[1, 1]))].into();
        let irr = IrrelevanceMap::compute(&store, &grads);
        let v = regularized_loss(0.5, &store, &irr, 0.1);
        assert!((v - (0.5 + 0.1 * 4.0)).abs() < 1e-7);
    }

    #[test]
    fn regularized_loss_skips_masked_and_bias() {
        let mut store = ParamStore::new();
        store
            .insert_masked(
                "w",
                Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap(),
                Mask::from_bits(vec![true, false]),
                true,
            )
            .unwrap();
        store
            .insert("w.bias", Tensor::new(vec![1], vec![10.0]).unwrap(), false)
            .unwrap();
        let grads: IndexMap<_, _> = [
            ("w".to_string(), Tensor::zeros(&[1, 2])),
            ("w.bias".to_string(), Tensor::zeros(&[1])),
        ]
        .into();
        let irr = IrrelevanceMap::compute(&store, &grads);
        assert!(irr.get("w.bias").is_none());
        assert!((regularized_loss(0.0, &store, &irr, 1.0) - 4.0).abs() < 1e-7);
    }

    #[test]
    fn reg_gradient_examples() {
        assert!((reg1(RegMode::Relevance, 0.001, 1.0, 0.0) - 0.002).abs() < 1e-9);
        // 2 · 0.001 · e^-2 · 0.5, evaluated in f64
        let expected = 2.0 * 0.001 * (-2.0f64).exp() * 0.5;
        assert!((expected - 1.353_352_832e-4).abs() < 1e-12);
        assert!((reg1(RegMode::Relevance, 0.001, 0.5, 2.0) - expected).abs() < 1e-10);
        assert!((reg1(RegMode::L2, 0.01, -3.0, 0.7) + 0.06).abs() < 1e-7);
        assert_eq!(reg1(RegMode::L1, 0.01, -3.0, 0.7), -(0.01f32 as f64));
        assert_eq!(reg1(RegMode::L1, 0.01, 0.0, 0.7), 0.0);
        assert_eq!(reg1(RegMode::None, 0.01, 2.0, 0.0), 0.0);
    }

    #[test]
    fn reg_gradient_zero_at_masked_positions() {
        let w = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::zeros(&[1, 3]);
        let mask = Mask::from_bits(vec![true, false, true]);
        for mode in [RegMode::L1, RegMode::L2, RegMode::Relevance] {
            assert_eq!(reg_gradient(mode, 0.1, &w, &g, &mask).data()[1], 0.0);
        }
    }

    #[test]
    fn lambda_schedule_examples() {
        let cfg = RegConfig {
            lambda0: 0.001,
            decay_gamma: 0.98,
            ..RegConfig::default()
        };
        let mut st = LambdaState::default();
        assert_eq!(lambda_effective(&cfg, &st), 0.001);
        for _ in 0..10 {
            st.record_skip();
        }
        let expected = 0.001f64 * 0.98f64.powi(10);
        assert!((expected - 8.170_728e-4).abs() < 1e-9);
        assert!(((lambda_effective(&cfg, &st) as f64) - expected).abs() / expected < 1e-6);
        st.record_prune();
        assert_eq!(lambda_effective(&cfg, &st), 0.001);

        let flat = RegConfig {
            decay_gamma: 1.0,
            ..cfg
        };
        let st = LambdaState { failed_checks: 57 };
        assert_eq!(lambda_effective(&flat, &st), 0.001);
    }

    #[test]
    fn config_validation() {
        assert!(RegConfig::default().validate().is_ok());
        let bad = [
            RegConfig {
                lambda0: -1.0,
                ..RegConfig::default()
            },
            RegConfig {
                decay_gamma: 0.0,
                ..RegConfig::default()
            },
            RegConfig {
                decay_gamma: 1.5,
                ..RegConfig::default()
            },
            RegConfig {
                eta: 0.0,
                ..RegConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn mode_parsing() {
        for m in ["none", "l1", "l2", "relevance"] {
            assert_eq!(m.parse::<RegMode>().unwrap().to_string(), m);
        }
        assert!("l3".parse::<RegMode>().is_err());
    }
}
