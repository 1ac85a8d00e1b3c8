//! Trainable layer primitives evaluated on two streams (inputs and targets)
//! that share weights.
//!
//! Every op keeps a LIFO of forward caches per stream. `forward` in
//! [`Mode::Train`] pushes, `backward` pops. Sigprop training runs forward and
//! backward back to back, so each op holds at most one cached microbatch per
//! stream; unrolled baselines (BPTT) push one entry per time step.

mod block;
mod conv;
mod dense;
mod misc;
mod norm;

pub use block::Block;
pub use conv::Conv2d;
pub use dense::{prefix_columns, zero_extend, Dense};
pub use misc::{Dropout, Flatten, LeakyRelu, MaxPool};
pub use norm::BatchNorm;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamState};
use crate::tensor::{Scalar, Tensor};

/// Which half of a signal batch a forward call carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Input,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cache state for a later backward call; batch statistics on inputs.
    Train,
    /// No caching, running statistics, no dropout.
    Eval,
}

/// Sparsity layout of a target tensor entering an affine op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    #[default]
    Dense,
    /// Only the leading `k` features are non-zero (zero-extended fc target).
    Prefix(usize),
    /// Kernel-shaped conv target `[m, c_in, kh, kw]`; convolved without
    /// padding into a `1×1` map.
    Kernel,
}

/// Arguments shared by every forward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub stream: Stream,
    pub mode: Mode,
    pub layout: Layout,
}

impl Pass {
    pub fn train(stream: Stream) -> Self {
        Self {
            stream,
            mode: Mode::Train,
            layout: Layout::Dense,
        }
    }

    pub fn eval(stream: Stream) -> Self {
        Self {
            stream,
            mode: Mode::Eval,
            layout: Layout::Dense,
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }
}

/// A trainable tensor with its accumulated gradient and optimizer state.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            adam: AdamState::new(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn step(&mut self, adam: &Adam, lr: f64) {
        adam.update(&mut self.value, &self.grad, &mut self.adam, lr);
    }
}

/// Per-stream LIFO of cached forward state.
#[derive(Debug, Clone)]
pub(crate) struct Caches<C> {
    input: Vec<C>,
    target: Vec<C>,
}

impl<C> Default for Caches<C> {
    fn default() -> Self {
        Self {
            input: Vec::new(),
            target: Vec::new(),
        }
    }
}

impl<C> Caches<C> {
    fn slot(&mut self, s: Stream) -> &mut Vec<C> {
        match s {
            Stream::Input => &mut self.input,
            Stream::Target => &mut self.target,
        }
    }

    pub(crate) fn push(&mut self, s: Stream, c: C) {
        self.slot(s).push(c);
    }

    pub(crate) fn pop(&mut self, s: Stream) -> Result<C> {
        self.slot(s)
            .pop()
            .ok_or_else(|| Error::Protocol("update before forward: no cached microbatch".into()))
    }

    pub(crate) fn len(&self) -> usize {
        self.input.len() + self.target.len()
    }

    pub(crate) fn clear(&mut self) {
        self.input.clear();
        self.target.clear();
    }
}

/// One primitive inside a [`Block`].
#[derive(Debug, Clone)]
pub enum Op<T: Scalar> {
    Dense(Dense<T>),
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    LeakyRelu(LeakyRelu<T>),
    Dropout(Dropout),
    MaxPool(MaxPool),
    Flatten(Flatten),
}

impl<T: Scalar> Op<T> {
    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        match self {
            Op::Dense(l) => l.forward(x, pass),
            Op::Conv(l) => l.forward(x, pass),
            Op::BatchNorm(l) => l.forward(x, pass),
            Op::LeakyRelu(l) => l.forward(x, pass),
            Op::Dropout(l) => l.forward(x, pass),
            Op::MaxPool(l) => l.forward(x, pass),
            Op::Flatten(l) => l.forward(x, pass),
        }
    }

    /// Pops this op's cache for `stream`, accumulates parameter gradients
    /// and returns the input gradient when `need_input` is set.
    pub fn backward(
        &mut self,
        dout: &Tensor<T>,
        stream: Stream,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        match self {
            Op::Dense(l) => l.backward(dout, stream, need_input),
            Op::Conv(l) => l.backward(dout, stream, need_input),
            Op::BatchNorm(l) => l.backward(dout, stream).map(Some),
            Op::LeakyRelu(l) => l.backward(dout, stream).map(Some),
            Op::Dropout(l) => l.backward(dout, stream).map(Some),
            Op::MaxPool(l) => l.backward(dout, stream).map(Some),
            Op::Flatten(l) => l.backward(dout, stream).map(Some),
        }
    }

    /// Drops one cache entry without computing anything.
    pub fn discard(&mut self, stream: Stream) -> Result<()> {
        match self {
            Op::Dense(l) => l.cache.pop(stream).map(drop),
            Op::Conv(l) => l.cache.pop(stream).map(drop),
            Op::BatchNorm(l) => l.cache.pop(stream).map(drop),
            Op::LeakyRelu(l) => l.cache.pop(stream).map(drop),
            Op::Dropout(l) => l.cache.pop(stream).map(drop),
            Op::MaxPool(l) => l.cache.pop(stream).map(drop),
            Op::Flatten(l) => l.cache.pop(stream).map(drop),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Op::Dense(l) => vec![&mut l.w, &mut l.b],
            Op::Conv(l) => vec![&mut l.w, &mut l.b],
            Op::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Op::Dense(l) => vec![&l.w, &l.b],
            Op::Conv(l) => vec![&l.w, &l.b],
            Op::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Op::Dense(_) | Op::Conv(_) | Op::BatchNorm(_))
    }

    pub fn cached_entries(&self) -> usize {
        match self {
            Op::Dense(l) => l.cache.len(),
            Op::Conv(l) => l.cache.len(),
            Op::BatchNorm(l) => l.cache.len(),
            Op::LeakyRelu(l) => l.cache.len(),
            Op::Dropout(l) => l.cache.len(),
            Op::MaxPool(l) => l.cache.len(),
            Op::Flatten(l) => l.cache.len(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Op::Dense(l) => l.cache.clear(),
            Op::Conv(l) => l.cache.clear(),
            Op::BatchNorm(l) => l.cache.clear(),
            Op::LeakyRelu(l) => l.cache.clear(),
            Op::Dropout(l) => l.cache.clear(),
            Op::MaxPool(l) => l.cache.clear(),
            Op::Flatten(l) => l.cache.clear(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Dense(_) => "dense",
            Op::Conv(_) => "conv",
            Op::BatchNorm(_) => "batchnorm",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Dropout(_) => "dropout",
            Op::MaxPool(_) => "maxpool",
            Op::Flatten(_) => "flatten",
        }
    }
}
