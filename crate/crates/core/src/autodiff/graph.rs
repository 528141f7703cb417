//! Static computation graphs with cached forward values and reverse-mode
//! gradient propagation.
//!
//! A [`Graph`] is built once from a model description. Nodes can only refer
//! to nodes created before them, so node order is a topological order and the
//! graph is acyclic by construction. Parameters live outside the graph in a
//! [`ParamStore`], which lets several graphs (stage-one streams, the assembled
//! dual-stream network) share the same named tensors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeometry};
use crate::error::GraphError;
use crate::tensor::{Scalar, Tensor};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Linear,
    Relu,
    MaxPool2d,
    GlobalAvgPool2d,
    BatchNorm2d,
    Add,
    Mul,
    Sum,
    Concat,
    Softmax,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(index: usize) -> Self {
        NodeId(index)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    MaxPool2d {
        input: NodeId,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool2d(NodeId),
    BatchNorm2d {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: String,
        running_var: String,
        eps: f64,
        momentum: f64,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Softmax(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: NodeId,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool2d(_) => OpKind::GlobalAvgPool2d,
            Op::BatchNorm2d { .. } => OpKind::BatchNorm2d,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(_) => OpKind::Sum,
            Op::Concat(_) => OpKind::Concat,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

/// How a declared parameter is initialized when missing from the store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    FanInNormal { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter and buffer tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries
            .insert(name.into(), ParamEntry { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<T>> {
        self.entries.remove(name)
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn copy_prefixed(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (name, entry) in other.entries.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            self.entries.insert(name.clone(), entry.clone());
        }
    }

    /// Creates every declared parameter that is not yet present, in
    /// declaration order, drawing from `rng`.
    pub fn initialize<R: Rng + ?Sized>(
        &mut self,
        decls: &[ParamDecl],
        rng: &mut R,
    ) -> Result<(), GraphError> {
        for decl in decls {
            if let Some(existing) = self.entries.get(&decl.name) {
                if existing.value.shape() != decl.shape.as_slice() {
                    return Err(GraphError::ParamShape {
                        name: decl.name.clone(),
                        declared: decl.shape.clone(),
                        found: existing.value.shape().to_vec(),
                    });
                }
                continue;
            }
            let value = match decl.init {
                Init::Zeros => Tensor::zeros(&decl.shape),
                Init::Ones => Tensor::full(&decl.shape, T::one()),
                Init::FanInNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let n: usize = decl.shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::from_f64_lossy(normal.sample(rng)))
                        .collect();
                    Tensor::new(decl.shape.clone(), data)?
                }
            };
            self.insert(decl.name.clone(), value, decl.trainable);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradients of trainable parameters, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T = f32> {
    pub(crate) by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.by_name.insert(name.into(), grad);
    }
}

enum Cache<T> {
    None,
    Argmax(Vec<usize>),
    BatchNorm {
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
}

pub struct Graph<T = f32> {
    ops: Vec<Op>,
    decls: Vec<ParamDecl>,
    values: Vec<Option<Tensor<T>>>,
    caches: Vec<Cache<T>>,
    mode: Mode,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: OpKind, shapes: &[&[usize]], detail: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            decls: Vec::new(),
            values: Vec::new(),
            caches: Vec::new(),
            mode: Mode::Eval,
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.values.clear();
        self.caches.clear();
        NodeId(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn kind(&self, node: NodeId) -> OpKind {
        self.ops[node.0].kind()
    }

    pub fn param_decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(i) = self
            .ops
            .iter()
            .position(|op| matches!(op, Op::Input(n) if n == name))
        {
            return NodeId(i);
        }
        self.push(Op::Input(name.to_string()))
    }

    /// Declares a trainable parameter and returns its node.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> NodeId {
        self.declare(name, shape, init, true);
        if let Some(i) = self
            .ops
            .iter()
            .position(|op| matches!(op, Op::Param(n) if n == name))
        {
            return NodeId(i);
        }
        self.push(Op::Param(name.to_string()))
    }

    fn declare(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) {
        if self.decls.iter().any(|d| d.name == name) {
            return;
        }
        self.decls.push(ParamDecl {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
            trainable,
        });
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> NodeId {
        self.push(Op::Linear {
            input,
            weight,
            bias,
        })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Relu(input))
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool2d {
            input,
            kernel,
            stride,
        })
    }

    pub fn global_avgpool2d(&mut self, input: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool2d(input))
    }

    /// Batch normalization over `channels` feature maps. Declares
    /// `{prefix}.weight`, `{prefix}.bias` and the running-statistics buffers
    /// `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        prefix: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> NodeId {
        let gamma = self.param(&format!("{prefix}.weight"), &[channels], Init::Ones);
        let beta = self.param(&format!("{prefix}.bias"), &[channels], Init::Zeros);
        let running_mean = format!("{prefix}.running_mean");
        let running_var = format!("{prefix}.running_var");
        self.declare(&running_mean, &[channels], Init::Zeros, false);
        self.declare(&running_var, &[channels], Init::Ones, false);
        self.push(Op::BatchNorm2d {
            input,
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            momentum,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum(input))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        self.push(Op::Concat(inputs.to_vec()))
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Softmax(input))
    }

    /// Mean negative log-likelihood of `labels` (class indices, shape `N`)
    /// under row-normalized `probs` (shape `N x K`).
    pub fn cross_entropy(&mut self, probs: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { probs, labels })
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.values.get(node.0).and_then(|v| v.as_ref())
    }

    fn val(&self, node: NodeId) -> &Tensor<T> {
        self.values[node.0]
            .as_ref()
            .expect("topological order guarantees evaluated inputs")
    }

    pub fn forward(
        &mut self,
        store: &mut ParamStore<T>,
        feed: &[(&str, &Tensor<T>)],
        mode: Mode,
    ) -> Result<(), GraphError> {
        for (name, _) in feed {
            if !self
                .ops
                .iter()
                .any(|op| matches!(op, Op::Input(n) if n == name))
            {
                return Err(GraphError::UnknownInput(name.to_string()));
            }
        }
        self.values.clear();
        self.caches.clear();
        self.mode = mode;
        for idx in 0..self.ops.len() {
            let (value, cache) = self.eval_node(idx, store, feed, mode)?;
            if cfg!(debug_assertions) && !value.is_finite() {
                return Err(GraphError::NonFinite {
                    op: self.ops[idx].kind(),
                });
            }
            self.values.push(Some(value));
            self.caches.push(cache);
        }
        Ok(())
    }

    fn eval_node(
        &self,
        idx: usize,
        store: &mut ParamStore<T>,
        feed: &[(&str, &Tensor<T>)],
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>), GraphError> {
        let op = &self.ops[idx];
        let kind = op.kind();
        let out = match op {
            Op::Input(name) => {
                let t = feed
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| GraphError::UnknownInput(name.clone()))?;
                (t, Cache::None)
            }
            Op::Param(name) => {
                let t = store
                    .get(name)
                    .ok_or_else(|| GraphError::MissingParam(name.clone()))?;
                if let Some(decl) = self.decls.iter().find(|d| &d.name == name) {
                    if t.shape() != decl.shape.as_slice() {
                        return Err(GraphError::ParamShape {
                            name: name.clone(),
                            declared: decl.shape.clone(),
                            found: t.shape().to_vec(),
                        });
                    }
                }
                (t.clone(), Cache::None)
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.val(*input);
                let w = self.val(*weight);
                let g = conv_geometry(x, w, *stride, *padding)?;
                let b = match bias {
                    Some(b) => {
                        let b = self.val(*b);
                        if b.shape() != [g.out_channels] {
                            return Err(shape_err(kind, &[x.shape(), w.shape(), b.shape()], "bias length must equal output channels"));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                let out = kernels::conv2d_forward(&g, x.data(), w.data(), b);
                (
                    Tensor::new(
                        vec![g.batch, g.out_channels, g.out_height(), g.out_width()],
                        out,
                    )?,
                    Cache::None,
                )
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.val(*input);
                let w = self.val(*weight);
                let (n, d, o) = linear_dims(x, w)?;
                let b = match bias {
                    Some(b) => {
                        let b = self.val(*b);
                        if b.shape() != [o] {
                            return Err(shape_err(kind, &[x.shape(), w.shape(), b.shape()], "bias length must equal output features"));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                let out = kernels::linear_forward(x.data(), w.data(), b, n, d, o);
                (Tensor::new(vec![n, o], out)?, Cache::None)
            }
            Op::Relu(input) => {
                let x = self.val(*input);
                let data = x
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect();
                (Tensor::new(x.shape().to_vec(), data)?, Cache::None)
            }
            Op::MaxPool2d {
                input,
                kernel,
                stride,
            } => {
                let x = self.val(*input);
                let dims = x
                    .dims4()
                    .ok_or_else(|| shape_err(kind, &[x.shape()], "expected N x C x H x W"))?;
                if *kernel == 0 || *stride == 0 || dims.2 < *kernel || dims.3 < *kernel {
                    return Err(shape_err(kind, &[x.shape()], format!("kernel {kernel} stride {stride} does not fit")));
                }
                let (out, arg, ho, wo) = kernels::maxpool_forward(x.data(), dims, *kernel, *stride);
                (
                    Tensor::new(vec![dims.0, dims.1, ho, wo], out)?,
                    Cache::Argmax(arg),
                )
            }
            Op::GlobalAvgPool2d(input) => {
                let x = self.val(*input);
                let dims = x
                    .dims4()
                    .ok_or_else(|| shape_err(kind, &[x.shape()], "expected N x C x H x W"))?;
                let out = kernels::global_avgpool_forward(x.data(), dims);
                (Tensor::new(vec![dims.0, dims.1], out)?, Cache::None)
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                let x = self.val(*input);
                let dims = x
                    .dims4()
                    .ok_or_else(|| shape_err(kind, &[x.shape()], "expected N x C x H x W"))?;
                let g = self.val(*gamma);
                let b = self.val(*beta);
                if g.shape() != [dims.1] || b.shape() != [dims.1] {
                    return Err(shape_err(kind, &[x.shape(), g.shape(), b.shape()], "affine parameters must have one entry per channel"));
                }
                let eps_t = T::from_f64_lossy(*eps);
                let rm = store
                    .get(running_mean)
                    .ok_or_else(|| GraphError::MissingParam(running_mean.clone()))?
                    .clone();
                let rv = store
                    .get(running_var)
                    .ok_or_else(|| GraphError::MissingParam(running_var.clone()))?
                    .clone();
                if rm.shape() != [dims.1] || rv.shape() != [dims.1] {
                    return Err(shape_err(kind, &[x.shape(), rm.shape(), rv.shape()], "running statistics must have one entry per channel"));
                }
                let res = match mode {
                    Mode::Train => {
                        kernels::batchnorm_forward(x.data(), dims, g.data(), b.data(), eps_t, None)
                    }
                    Mode::Eval => kernels::batchnorm_forward(
                        x.data(),
                        dims,
                        g.data(),
                        b.data(),
                        eps_t,
                        Some((rm.data(), rv.data())),
                    ),
                };
                if mode == Mode::Train {
                    let m = T::from_f64_lossy(*momentum);
                    let keep = T::one() - m;
                    let rm_mut = store.get_mut(running_mean).expect("checked above");
                    for (r, &bm) in rm_mut.data_mut().iter_mut().zip(&res.batch_mean) {
                        *r = keep * *r + m * bm;
                    }
                    let rv_mut = store.get_mut(running_var).expect("checked above");
                    for (r, &bv) in rv_mut.data_mut().iter_mut().zip(&res.batch_var_unbiased) {
                        *r = keep * *r + m * bv;
                    }
                }
                (
                    Tensor::new(x.shape().to_vec(), res.out)?,
                    Cache::BatchNorm {
                        normalized: res.normalized,
                        inv_std: res.inv_std,
                    },
                )
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(kind, &[a.shape(), b.shape()], "operands must have identical shapes"));
                }
                let data = if kind == OpKind::Add {
                    a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect()
                } else {
                    a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect()
                };
                (Tensor::new(a.shape().to_vec(), data)?, Cache::None)
            }
            Op::Sum(input) => (Tensor::scalar(self.val(*input).sum()), Cache::None),
            Op::Concat(inputs) => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|n| self.val(*n)).collect();
                let first = parts
                    .first()
                    .ok_or_else(|| shape_err(kind, &[], "no inputs"))?;
                if first.rank() < 2 {
                    return Err(shape_err(kind, &[first.shape()], "rank must be at least 2"));
                }
                let batch = first.shape()[0];
                let tail = &first.shape()[2..];
                for p in &parts {
                    if p.rank() != first.rank() || p.shape()[0] != batch || &p.shape()[2..] != tail {
                        let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
                        return Err(shape_err(kind, &shapes, "all dims except axis 1 must agree"));
                    }
                }
                let inner: usize = tail.iter().product();
                let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
                let mut data = Vec::with_capacity(batch * total_c * inner);
                for n in 0..batch {
                    for p in &parts {
                        let len = p.shape()[1] * inner;
                        data.extend_from_slice(&p.data()[n * len..(n + 1) * len]);
                    }
                }
                let mut shape = vec![batch, total_c];
                shape.extend_from_slice(tail);
                (Tensor::new(shape, data)?, Cache::None)
            }
            Op::Softmax(input) => {
                let x = self.val(*input);
                let (n, k) = x
                    .dims2()
                    .ok_or_else(|| shape_err(kind, &[x.shape()], "expected N x K"))?;
                (
                    Tensor::new(vec![n, k], kernels::softmax_rows(x.data(), n, k))?,
                    Cache::None,
                )
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.val(*probs);
                let y = self.val(*labels);
                let (n, k) = p
                    .dims2()
                    .ok_or_else(|| shape_err(kind, &[p.shape(), y.shape()], "expected N x K probabilities"))?;
                if n == 0 || y.numel() != n {
                    return Err(shape_err(kind, &[p.shape(), y.shape()], "one label per row required"));
                }
                let floor = T::from_f64_lossy(PROB_FLOOR);
                let mut total = T::zero();
                for i in 0..n {
                    let row = &p.data()[i * k..(i + 1) * k];
                    let sum: T = row.iter().copied().sum();
                    if (sum.as_f64() - 1.0).abs() > 1e-6 {
                        return Err(GraphError::ProbabilityRow {
                            row: i,
                            sum: sum.as_f64(),
                        });
                    }
                    let class = label_index(y.data()[i], i, k)?;
                    total += row[class].max(floor).ln();
                }
                let loss = -total / T::from_usize(n).unwrap();
                (Tensor::scalar(loss), Cache::None)
            }
        };
        Ok(out)
    }

    /// Propagates gradients from the scalar `loss` node back to every
    /// trainable parameter that influences it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        if self.values.len() != self.ops.len() {
            return Err(GraphError::BackwardBeforeForward);
        }
        let loss_val = self.val(loss);
        if loss_val.numel() != 1 {
            return Err(GraphError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), T::one()));
        let mut out = Gradients::default();
        let batch_stats = self.mode == Mode::Train;

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], node: NodeId, g: Tensor<T>) {
            match &mut grads[node.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Input(_) => {}
                Op::Param(name) => {
                    let trainable = self
                        .decls
                        .iter()
                        .find(|d| &d.name == name)
                        .map_or(true, |d| d.trainable);
                    if trainable {
                        match out.by_name.get_mut(name) {
                            Some(existing) => existing.add_assign(&dy),
                            None => {
                                out.by_name.insert(name.clone(), dy);
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let x = self.val(*input);
                    let w = self.val(*weight);
                    let g = conv_geometry(x, w, *stride, *padding)?;
                    let cg = kernels::conv2d_backward(&g, x.data(), w.data(), dy.data());
                    acc(&mut grads, *input, Tensor::new(x.shape().to_vec(), cg.input)?);
                    acc(&mut grads, *weight, Tensor::new(w.shape().to_vec(), cg.weight)?);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, Tensor::new(vec![g.out_channels], cg.bias)?);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.val(*input);
                    let w = self.val(*weight);
                    let (n, d, o) = linear_dims(x, w)?;
                    let (dx, dw, db) = kernels::linear_backward(x.data(), w.data(), dy.data(), n, d, o);
                    acc(&mut grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                    acc(&mut grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, Tensor::new(vec![o], db)?);
                    }
                }
                Op::Relu(input) => {
                    let x = self.val(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc(&mut grads, *input, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::MaxPool2d { input, .. } => {
                    let x = self.val(*input);
                    let Cache::Argmax(arg) = &self.caches[idx] else {
                        unreachable!("maxpool caches argmax")
                    };
                    let mut dx = vec![T::zero(); x.numel()];
                    for (&a, &g) in arg.iter().zip(dy.data()) {
                        dx[a] += g;
                    }
                    acc(&mut grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::GlobalAvgPool2d(input) => {
                    let x = self.val(*input);
                    let (_, _, h, w) = x.dims4().expect("validated in forward");
                    let area = T::from_usize(h * w).unwrap();
                    let mut dx = Vec::with_capacity(x.numel());
                    for &g in dy.data() {
                        dx.extend(std::iter::repeat(g / area).take(h * w));
                    }
                    acc(&mut grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::BatchNorm2d {
                    input, gamma, beta, ..
                } => {
                    let x = self.val(*input);
                    let dims = x.dims4().expect("validated in forward");
                    let Cache::BatchNorm {
                        normalized,
                        inv_std,
                    } = &self.caches[idx]
                    else {
                        unreachable!("batchnorm caches normalized input")
                    };
                    let gv = self.val(*gamma);
                    let (dx, dg, db) = kernels::batchnorm_backward(
                        dy.data(),
                        normalized,
                        inv_std,
                        gv.data(),
                        dims,
                        batch_stats,
                    );
                    acc(&mut grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                    acc(&mut grads, *gamma, Tensor::new(vec![dims.1], dg)?);
                    acc(&mut grads, *beta, Tensor::new(vec![dims.1], db)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let da = dy.data().iter().zip(bv.data()).map(|(g, v)| *g * *v).collect();
                    let db = dy.data().iter().zip(av.data()).map(|(g, v)| *g * *v).collect();
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Sum(input) => {
                    let x = self.val(*input);
                    acc(&mut grads, *input, Tensor::full(x.shape(), dy.data()[0]));
                }
                Op::Concat(inputs) => {
                    let parts: Vec<&Tensor<T>> = inputs.iter().map(|n| self.val(*n)).collect();
                    let batch = parts[0].shape()[0];
                    let inner: usize = parts[0].shape()[2..].iter().product();
                    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
                    let mut offset = 0;
                    for (node, p) in inputs.iter().zip(&parts) {
                        let len = p.shape()[1] * inner;
                        let mut d = Vec::with_capacity(p.numel());
                        for n in 0..batch {
                            let start = n * total_c * inner + offset;
                            d.extend_from_slice(&dy.data()[start..start + len]);
                        }
                        offset += len;
                        acc(&mut grads, *node, Tensor::new(p.shape().to_vec(), d)?);
                    }
                }
                Op::Softmax(input) => {
                    let p = self.val(NodeId(idx));
                    let (n, k) = p.dims2().expect("validated in forward");
                    let mut dx = vec![T::zero(); n * k];
                    for r in 0..n {
                        let pr = &p.data()[r * k..(r + 1) * k];
                        let gr = &dy.data()[r * k..(r + 1) * k];
                        let dot: T = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for c in 0..k {
                            dx[r * k + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *input, Tensor::new(vec![n, k], dx)?);
                }
                Op::CrossEntropy { probs, labels } => {
                    let p = self.val(*probs);
                    let y = self.val(*labels);
                    let (n, k) = p.dims2().expect("validated in forward");
                    let floor = T::from_f64_lossy(PROB_FLOOR);
                    let scale = dy.data()[0] / T::from_usize(n).unwrap();
                    let mut dp = vec![T::zero(); n * k];
                    for i in 0..n {
                        let class = label_index(y.data()[i], i, k)?;
                        dp[i * k + class] = -scale / p.data()[i * k + class].max(floor);
                    }
                    acc(&mut grads, *probs, Tensor::new(vec![n, k], dp)?);
                }
            }
        }
        Ok(out)
    }
}

fn label_index<T: Scalar>(v: T, index: usize, classes: usize) -> Result<usize, GraphError> {
    let f = v.as_f64();
    if f.fract() != 0.0 || f < 0.0 || f >= classes as f64 {
        return Err(GraphError::InvalidLabel { index, value: f });
    }
    Ok(f as usize)
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry, GraphError> {
    let err = |detail: &str| shape_err(OpKind::Conv2d, &[x.shape(), w.shape()], detail);
    let (n, c, h, wd) = x.dims4().ok_or_else(|| err("input must be N x C x H x W"))?;
    let (o, ci, kh, kw) = w.dims4().ok_or_else(|| err("weight must be O x C x kh x kw"))?;
    if ci != c {
        return Err(err("input channels differ from weight channels"));
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(err("kernel does not fit padded input"));
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: wd,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    })
}

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize), GraphError> {
    let err = |detail: &str| shape_err(OpKind::Linear, &[x.shape(), w.shape()], detail);
    let (n, d) = x.dims2().ok_or_else(|| err("input must be N x D"))?;
    let (o, di) = w.dims2().ok_or_else(|| err("weight must be O x D"))?;
    if d != di {
        return Err(err("input width differs from weight width"));
    }
    Ok((n, d, o))
}
