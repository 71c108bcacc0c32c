//! Layer descriptions, the LeNet-5 variants, and the masked parameter store.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Conv2dAttrs, Gradients, Pool2dAttrs, Tape, Var};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not match model input [batch, {expected:?}]")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("parameter `{0}` is missing from the store")]
    MissingParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("`{0}` is a bias or vector parameter and cannot be prunable")]
    PrunableBias(String),
    #[error("parameter `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("unknown model variant `{0}` (expected caffe_431k or classic_62k)")]
    UnknownVariant(String),
}

/// Binary keep-mask of a parameter; `true` marks a surviving weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn all_ones(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn get(&self, idx: usize) -> bool {
        self.0[idx]
    }

    pub(crate) fn clear(&mut self, idx: usize) {
        self.0[idx] = false;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Element = f32> {
    value: Tensor<T>,
    mask: Mask,
    prunable: bool,
}

impl<T: Element> ParamEntry<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn prunable(&self) -> bool {
        self.prunable
    }

    /// Number of surviving (unmasked) entries.
    pub fn remaining(&self) -> usize {
        self.mask.count_ones()
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    /// Zeros every masked position.
    pub(crate) fn apply_mask(&mut self) {
        for (v, &keep) in self.value.data_mut().iter_mut().zip(self.mask.bits()) {
            if !keep {
                *v = T::zero();
            }
        }
    }

    /// Masks one flat position and zeros its value.
    pub(crate) fn prune(&mut self, idx: usize) {
        self.mask.clear(idx);
        self.value.data_mut()[idx] = T::zero();
    }
}

/// Named trainable parameters in model declaration order.
///
/// Masked positions always hold exactly zero; non-prunable entries keep an
/// all-ones mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Adds a dense parameter with an all-ones mask.
    pub fn insert(&mut self, name: &str, value: Tensor<T>, prunable: bool) -> Result<(), ModelError> {
        let mask = Mask::ones(value.len());
        self.insert_masked(name, value, mask, prunable)
    }

    /// Adds a parameter with an explicit mask; masked values are zeroed.
    pub fn insert_masked(
        &mut self,
        name: &str,
        value: Tensor<T>,
        mask: Mask,
        prunable: bool,
    ) -> Result<(), ModelError> {
        if self.entries.contains_key(name) {
            return Err(ModelError::DuplicateParam(name.to_string()));
        }
        if prunable && (name.ends_with(".bias") || value.ndim() < 2) {
            return Err(ModelError::PrunableBias(name.to_string()));
        }
        if mask.len() != value.len() {
            return Err(ModelError::Invalid {
                name: name.to_string(),
                reason: format!("mask has {} entries, value has {}", mask.len(), value.len()),
            });
        }
        if !prunable && !mask.all_ones() {
            return Err(ModelError::Invalid {
                name: name.to_string(),
                reason: "non-prunable parameters must keep an all-ones mask".into(),
            });
        }
        let mut entry = ParamEntry { value, mask, prunable };
        entry.apply_mask();
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn prunable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.prunable).map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every trainable scalar, weights and biases.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Unmasked scalars over the whole store.
    pub fn remaining(&self) -> usize {
        self.entries.values().map(ParamEntry::remaining).sum()
    }

    pub fn prunable_total(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.prunable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn prunable_remaining(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.prunable)
            .map(ParamEntry::remaining)
            .sum()
    }

    /// Masks one flat position of a prunable parameter.
    pub fn prune_at(&mut self, name: &str, idx: usize) -> Result<(), ModelError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if !entry.prunable {
            return Err(ModelError::Invalid {
                name: name.to_string(),
                reason: "parameter is not prunable".into(),
            });
        }
        if idx >= entry.value.len() {
            return Err(ModelError::Invalid {
                name: name.to_string(),
                reason: format!("index {idx} out of bounds"),
            });
        }
        entry.prune(idx);
        Ok(())
    }

    /// Replaces a parameter value, re-applying the existing mask.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(ModelError::Invalid {
                name: name.to_string(),
                reason: format!("shape {:?} != {:?}", value.shape(), entry.value.shape()),
            });
        }
        entry.value = value;
        entry.apply_mask();
        Ok(())
    }

    /// Checks the masked-zero and non-prunable-mask invariants.
    pub fn check_invariants(&self) -> Result<(), ModelError> {
        for (name, e) in &self.entries {
            if !e.prunable && !e.mask.all_ones() {
                return Err(ModelError::Invalid {
                    name: name.clone(),
                    reason: "non-prunable parameter has masked entries".into(),
                });
            }
            let leak = e
                .value
                .data()
                .iter()
                .zip(e.mask.bits())
                .position(|(v, &keep)| !keep && *v != T::zero());
            if let Some(idx) = leak {
                return Err(ModelError::Invalid {
                    name: name.clone(),
                    reason: format!("masked position {idx} holds a nonzero value"),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            mask: e.mask.clone(),
                            prunable: e.prunable,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// One stage of a sequential model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
    },
    Act(Activation),
    Flatten,
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LenetVariant {
    /// 20-50-500-10, 431,080 parameters.
    Caffe431k,
    /// 6-16-120-84-10 on a zero-padded input, 61,706 parameters.
    Classic62k,
}

impl FromStr for LenetVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "caffe_431k" => Ok(Self::Caffe431k),
            "classic_62k" => Ok(Self::Classic62k),
            other => Err(ModelError::UnknownVariant(other.to_string())),
        }
    }
}

impl LenetVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Caffe431k => "caffe_431k",
            Self::Classic62k => "classic_62k",
        }
    }
}

/// Shape of one parameter as declared by a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub prunable: bool,
}

/// Architecture of a sequential classifier plus its initialization seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// Per-example input shape, e.g. `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Layer {
    Layer::Conv2d {
        name: name.to_string(),
        in_channels,
        out_channels,
        kernel,
        padding,
    }
}

fn dense(name: &str, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        inputs,
        outputs,
    }
}

impl ModelSpec {
    pub fn lenet(variant: LenetVariant, seed: u64) -> Self {
        use Activation::{Relu, Tanh};
        let layers = match variant {
            LenetVariant::Caffe431k => vec![
                conv("Conv1", 1, 20, 5, 0),
                Layer::MaxPool { size: 2 },
                Layer::Act(Relu),
                conv("Conv2", 20, 50, 5, 0),
                Layer::MaxPool { size: 2 },
                Layer::Act(Relu),
                Layer::Flatten,
                dense("FC1", 50 * 4 * 4, 500),
                Layer::Act(Relu),
                dense("FC2", 500, 10),
            ],
            LenetVariant::Classic62k => vec![
                conv("Conv1", 1, 6, 5, 2),
                Layer::Act(Tanh),
                Layer::MaxPool { size: 2 },
                conv("Conv2", 6, 16, 5, 0),
                Layer::Act(Tanh),
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                dense("FC1", 16 * 5 * 5, 120),
                Layer::Act(Tanh),
                dense("FC2", 120, 84),
                Layer::Act(Tanh),
                dense("FC3", 84, 10),
            ],
        };
        Self {
            name: variant.as_str().to_string(),
            input: vec![1, 28, 28],
            layers,
            seed,
        }
    }

    /// Fully connected ReLU network over flattened 28×28 inputs.
    pub fn mlp(hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut layers = vec![Layer::Flatten];
        let mut width = 28 * 28;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(dense(&format!("FC{}", i + 1), width, h));
            layers.push(Layer::Act(Activation::Relu));
            width = h;
        }
        layers.push(dense(&format!("FC{}", hidden.len() + 1), width, classes));
        let dims: Vec<String> = hidden.iter().map(usize::to_string).collect();
        Self {
            name: format!("mlp_{}", dims.join("_")),
            input: vec![1, 28, 28],
            layers,
            seed,
        }
    }

    /// Parameters in declaration order: each weight followed by its bias.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let (name, wshape, bias) = match layer {
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (name, vec![*out_channels, *in_channels, *kernel, *kernel], *out_channels),
                Layer::Dense { name, inputs, outputs } => (name, vec![*inputs, *outputs], *outputs),
                _ => continue,
            };
            out.push(ParamShape {
                name: name.clone(),
                shape: wshape,
                prunable: true,
            });
            out.push(ParamShape {
                name: format!("{name}.bias"),
                shape: vec![bias],
                prunable: false,
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Stable 64-bit digest of the architecture (the seed is excluded).
    pub fn fingerprint(&self) -> u64 {
        let mut canon = format!("input={:?};", self.input);
        for layer in &self.layers {
            let _ = write!(canon, "{layer:?};");
        }
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init_params(&self) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut store = ParamStore::new();
        for p in self.param_shapes() {
            let value = if p.prunable {
                let fan_in: usize = if p.shape.len() == 4 {
                    p.shape[1..].iter().product()
                } else {
                    p.shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                Tensor::from_fn(&p.shape, |_| rng.gen_range(-bound..bound))
            } else {
                Tensor::zeros(&p.shape)
            };
            store
                .insert(&p.name, value, p.prunable)
                .expect("spec declares unique, well-formed parameters");
        }
        store
    }

    /// Records the forward pass on `tape` and returns the logits variable.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: Tensor<T>,
    ) -> Result<Var, ModelError> {
        if images.ndim() != self.input.len() + 1 || images.shape()[1..] != self.input[..] {
            return Err(ModelError::InputShape {
                got: images.shape().to_vec(),
                expected: self.input.clone(),
            });
        }
        let param = |tape: &mut Tape<T>, name: &str| -> Result<Var, ModelError> {
            let entry = store
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            Ok(tape.param(name, entry.value().clone())?)
        };
        let mut x = tape.constant(images);
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d { name, padding, .. } => {
                    let w = param(tape, name)?;
                    let b = param(tape, &format!("{name}.bias"))?;
                    let y = tape.conv2d(
                        x,
                        w,
                        Conv2dAttrs {
                            stride: 1,
                            padding: *padding,
                        },
                    )?;
                    tape.add_bias(y, b)?
                }
                Layer::MaxPool { size } => tape.maxpool2d(
                    x,
                    Pool2dAttrs {
                        size: *size,
                        stride: *size,
                    },
                )?,
                Layer::Act(Activation::Relu) => tape.relu(x)?,
                Layer::Act(Activation::Tanh) => tape.tanh(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Dense { name, .. } => {
                    let w = param(tape, name)?;
                    let b = param(tape, &format!("{name}.bias"))?;
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
            };
        }
        Ok(x)
    }

    pub fn logits<T: Element>(&self, store: &ParamStore<T>, images: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, images)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy of a batch and its gradients for every parameter.
    pub fn loss_and_grads<T: Element>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, Gradients<T>), ModelError> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, store, images)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], grads))
    }
}

/// Builds a LeNet-5 variant and its freshly initialized parameters.
pub fn build_lenet(variant: LenetVariant, seed: u64) -> (ModelSpec, ParamStore) {
    let spec = ModelSpec::lenet(variant, seed);
    let store = spec.init_params();
    (spec, store)
}
