//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its value and whatever the backward rule
//! needs (im2col buffers, pooling argmaxes, softmax probabilities). Nodes are
//! appended in evaluation order, so operands always precede their consumers
//! and a single reverse sweep is a valid topological traversal.

use indexmap::IndexMap;

use crate::tensor::{gemm, Element, Tensor, TensorError, Trans};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

/// Window size and stride of a max pooling op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dAttrs {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        // im2col of every image, [batch][patch × positions]
        cols: Vec<T>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    AddBias {
        input: Var,
        bias: Var,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

/// Result of [`Tape::backward`]: one gradient slot per node plus the
/// gradients of every named parameter.
pub struct Gradients<T: Element = f32> {
    slots: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.slots.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor<T>> {
        self.params
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Records a trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var, TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let var = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<(), TensorError> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} · {:?}", av.shape(), bv.shape()),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            Trans::No,
            bv.data(),
            Trans::No,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel, via im2col.
    pub fn conv2d(&mut self, input: Var, kernel: Var, attrs: Conv2dAttrs) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(kernel)?;
        let (x, w) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if attrs.stride == 0 {
            return Err(TensorError::InvalidAttr {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} (NCHW) vs kernel {:?} (OIHW)", x.shape(), w.shape()),
            });
        }
        let (batch, in_ch, height, width) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_ch, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (ph, pw) = (height + 2 * attrs.padding, width + 2 * attrs.padding);
        if kh > ph || kw > pw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}×{kw} larger than padded input {ph}×{pw}"),
            });
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            out_h: (ph - kh) / attrs.stride + 1,
            out_w: (pw - kw) / attrs.stride + 1,
            stride: attrs.stride,
            padding: attrs.padding,
        };
        let (patch, positions) = (geom.patch(), geom.positions());
        let image_len = in_ch * height * width;
        let mut cols = vec![T::zero(); batch * patch * positions];
        let mut out = vec![T::zero(); batch * out_ch * positions];
        for n in 0..batch {
            let col = &mut cols[n * patch * positions..(n + 1) * patch * positions];
            im2col(&x.data()[n * image_len..(n + 1) * image_len], &geom, col);
            gemm(
                out_ch,
                patch,
                positions,
                T::one(),
                w.data(),
                Trans::No,
                col,
                Trans::No,
                T::zero(),
                &mut out[n * out_ch * positions..(n + 1) * out_ch * positions],
            );
        }
        let value = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        let rg = self.grad_flag(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Max pooling over NCHW; ties go to the first index in scan order.
    pub fn maxpool2d(&mut self, input: Var, attrs: Pool2dAttrs) -> Result<Var, TensorError> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        if attrs.size == 0 || attrs.stride == 0 {
            return Err(TensorError::InvalidAttr {
                op: "maxpool2d",
                detail: "window size and stride must be at least 1".into(),
            });
        }
        if x.ndim() != 4 || x.shape()[2] < attrs.size || x.shape()[3] < attrs.size {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("input {:?} with {}×{} window", x.shape(), attrs.size, attrs.size),
            });
        }
        let (planes, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
        let oh = (h - attrs.size) / attrs.stride + 1;
        let ow = (w - attrs.size) / attrs.stride + 1;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let data = x.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * attrs.stride * w + ox * attrs.stride;
                    for ky in 0..attrs.size {
                        let row = base + (oy * attrs.stride + ky) * w + ox * attrs.stride;
                        for kx in 0..attrs.size {
                            if data[row + kx] > data[best] {
                                best = row + kx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![x.shape()[0], x.shape()[1], oh, ow], out)?;
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let value = self.nodes[input.0]
            .value
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::Relu(input), rg))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let value = self.nodes[input.0].value.map(|x| x.tanh());
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::Tanh(input), rg))
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` input.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(bias)?;
        let (x, b) = (&self.nodes[input.0].value, &self.nodes[bias.0].value);
        if x.ndim() < 2 || b.ndim() != 1 || b.shape()[0] != x.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("input {:?} vs bias {:?}", x.shape(), b.shape()),
            });
        }
        let channels = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bc = b.data()[i % channels];
            for v in chunk {
                *v = *v + bc;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.grad_flag(&[input, bias]);
        Ok(self.push(value, Op::AddBias { input, bias }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        let n = x.shape()[0];
        let rest = x.len() / n;
        let value = x.clone().reshape(&[n, rest])?;
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x + y)
            .map_err(|_| self.mismatch("add", a, b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| x * y)
            .map_err(|_| self.mismatch("mul", a, b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, TensorError> {
        self.check(input)?;
        let value = self.nodes[input.0].value.map(|x| x * factor);
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::Scale(input, factor), rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let value = Tensor::scalar(self.nodes[input.0].value.sum());
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::Sum(input), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let z = &self.nodes[logits.0].value;
        if z.ndim() != 2 || z.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} vs {} labels", z.shape(), labels.len()),
            });
        }
        let (batch, classes) = (z.shape()[0], z.shape()[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![T::zero(); batch * classes];
        let mut total = T::zero();
        for (row, (zr, pr)) in z.data().chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for (p, &v) in pr.iter_mut().zip(zr) {
                *p = (v - max).exp();
                denom = denom + *p;
            }
            for p in pr.iter_mut() {
                *p = *p / denom;
            }
            total = total + (max + denom.ln() - zr[labels[row]]);
        }
        let value = Tensor::scalar(total / T::from_f64(batch as f64));
        let rg = self.grad_flag(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            detail: format!(
                "{:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            ),
        }
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Named parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.check(loss)?;
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(root.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = slots[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut slots);
            slots[idx] = Some(upstream);
        }

        let params = self
            .params
            .iter()
            .map(|(name, var)| {
                let g = slots[var.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[var.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { slots, params })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        Trans::No,
                        bv.data(),
                        Trans::Yes,
                        T::zero(),
                        &mut da,
                    );
                    accumulate(slots, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        Trans::Yes,
                        g.data(),
                        Trans::No,
                        T::zero(),
                        &mut db,
                    );
                    accumulate(slots, *b, bv.shape(), db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let w = &self.nodes[kernel.0].value;
                let (patch, positions) = (geom.patch(), geom.positions());
                let out_len = geom.out_ch * positions;
                if self.wants(*kernel) {
                    let mut dw = vec![T::zero(); geom.out_ch * patch];
                    for n in 0..geom.batch {
                        gemm(
                            geom.out_ch,
                            positions,
                            patch,
                            T::one(),
                            &g.data()[n * out_len..(n + 1) * out_len],
                            Trans::No,
                            &cols[n * patch * positions..(n + 1) * patch * positions],
                            Trans::Yes,
                            T::one(),
                            &mut dw,
                        );
                    }
                    accumulate(slots, *kernel, w.shape(), dw);
                }
                if self.wants(*input) {
                    let image_len = geom.in_ch * geom.height * geom.width;
                    let mut dx = vec![T::zero(); geom.batch * image_len];
                    let mut dcol = vec![T::zero(); patch * positions];
                    for n in 0..geom.batch {
                        gemm(
                            patch,
                            geom.out_ch,
                            positions,
                            T::one(),
                            w.data(),
                            Trans::Yes,
                            &g.data()[n * out_len..(n + 1) * out_len],
                            Trans::No,
                            T::zero(),
                            &mut dcol,
                        );
                        col2im(&dcol, geom, &mut dx[n * image_len..(n + 1) * image_len]);
                    }
                    accumulate(slots, *input, self.nodes[input.0].value.shape(), dx);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let x = &self.nodes[input.0].value;
                let mut dx = vec![T::zero(); x.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] = dx[src] + gv;
                }
                accumulate(slots, *input, x.shape(), dx);
            }
            Op::Relu(input) => {
                let x = &self.nodes[input.0].value;
                let dx = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(slots, *input, x.shape(), dx);
            }
            Op::Tanh(input) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                accumulate(slots, *input, node.value.shape(), dx);
            }
            Op::AddBias { input, bias } => {
                if self.wants(*input) {
                    accumulate(slots, *input, g.shape(), g.data().to_vec());
                }
                if self.wants(*bias) {
                    let channels = g.shape()[1];
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); channels];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        let c = i % channels;
                        db[c] = chunk.iter().fold(db[c], |acc, &v| acc + v);
                    }
                    accumulate(slots, *bias, &[channels], db);
                }
            }
            Op::Reshape(input) => {
                let shape = self.nodes[input.0].value.shape();
                accumulate(slots, *input, shape, g.data().to_vec());
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(slots, *v, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.wants(*a) {
                    let da = g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                    accumulate(slots, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let db = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                    accumulate(slots, *b, bv.shape(), db);
                }
            }
            Op::Scale(input, factor) => {
                let dx = g.data().iter().map(|&gv| gv * *factor).collect();
                accumulate(slots, *input, g.shape(), dx);
            }
            Op::Sum(input) => {
                let shape = self.nodes[input.0].value.shape();
                let gv = g.data()[0];
                accumulate(slots, *input, shape, vec![gv; shape.iter().product()]);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let classes = probs.len() / labels.len();
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    let i = row * classes + label;
                    dz[i] = dz[i] - scale;
                }
                accumulate(slots, *logits, self.nodes[logits.0].value.shape(), dz);
            }
        }
    }
}

fn accumulate<T: Element>(slots: &mut [Option<Tensor<T>>], var: Var, shape: &[usize], grad: Vec<T>) {
    match &mut slots[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad) {
                *a = *a + b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), grad).expect("gradient shape matches value"));
        }
    }
}

fn im2col<T: Element>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * positions;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.height {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix as usize >= g.width {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * positions;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}
