//! Backpropagation, feedback alignment and shallow (classifier-only)
//! training over the same networks the sigprop trainer uses.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::layers::{Dense, Op, Pass, Stream};
use crate::signal::softmax_ce;
use crate::tensor::{init, Init, MemoryScope, RngStream, Scalar, Tensor};
use crate::trainer::{LayerStat, Network, StepContext};

/// Fixed matrices `B_i`, one per dense layer, shaped like `W_iᵀ`.
#[derive(Debug, Clone)]
pub struct FeedbackWeights<T: Scalar> {
    pub matrices: Vec<Tensor<T>>,
}

fn dense_layers<T: Scalar>(net: &Network<T>) -> Vec<&Dense<T>> {
    let mut out: Vec<&Dense<T>> = net
        .blocks
        .iter()
        .flat_map(|b| b.ops.iter())
        .filter_map(|op| match op {
            Op::Dense(d) => Some(d),
            _ => None,
        })
        .collect();
    out.extend(net.classifier.as_ref());
    out
}

fn dense_layers_mut<T: Scalar>(net: &mut Network<T>) -> Vec<&mut Dense<T>> {
    let mut out: Vec<&mut Dense<T>> = net
        .blocks
        .iter_mut()
        .flat_map(|b| b.ops.iter_mut())
        .filter_map(|op| match op {
            Op::Dense(d) => Some(d),
            _ => None,
        })
        .collect();
    out.extend(net.classifier.as_mut());
    out
}

impl<T: Scalar> FeedbackWeights<T> {
    /// Random matrices drawn like the forward weights they stand in for.
    pub fn random(net: &Network<T>, rng: &mut RngStream) -> Self {
        let matrices = dense_layers(net)
            .into_iter()
            .map(|d| {
                init(
                    &[d.d_out(), d.d_in()],
                    Init::KaimingUniform {
                        fan_in: d.d_in(),
                        slope: 0.01,
                    },
                    rng,
                )
            })
            .collect();
        Self { matrices }
    }

    /// `B_i = W_iᵀ` at the current weights.
    pub fn transposes(net: &Network<T>) -> Result<Self> {
        let matrices = dense_layers(net)
            .into_iter()
            .map(|d| d.w.value.transpose2())
            .collect::<Result<_>>()?;
        Ok(Self { matrices })
    }

    /// Routes every dense layer's input gradient through its `B_i`.
    pub fn install(&self, net: &mut Network<T>) -> Result<()> {
        let layers = dense_layers_mut(net);
        if layers.len() != self.matrices.len() {
            return Err(Error::Argument(format!(
                "{} feedback matrices for {} dense layers",
                self.matrices.len(),
                layers.len()
            )));
        }
        for (d, b) in layers.into_iter().zip(&self.matrices) {
            if b.shape() != [d.d_out(), d.d_in()] {
                return Err(Error::dim(
                    "feedback weights",
                    b.shape(),
                    &[d.d_out(), d.d_in()],
                ));
            }
            d.feedback = Some(b.clone());
        }
        Ok(())
    }

    /// Angle in degrees between `vec(W_iᵀ)` and `vec(B_i)` for every layer.
    pub fn angles(&self, net: &Network<T>) -> Result<Vec<f64>> {
        dense_layers(net)
            .into_iter()
            .zip(&self.matrices)
            .map(|(d, b)| crate::ep::alignment_angle(&d.w.value.transpose2()?, b))
            .collect()
    }
}

/// Forward through every block and the classifier in training mode, then
/// backward through the whole chain. Gradients are left in the parameters;
/// returns loss, correct count and per-block seconds.
pub fn bp_backward<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, usize, Vec<f64>)> {
    let depth = net.blocks.len();
    let mut secs = vec![0.0; depth + 1];
    let mut h = x.clone();
    let mut shapes = Vec::with_capacity(depth);
    for (i, b) in net.blocks.iter_mut().enumerate() {
        let start = Instant::now();
        b.zero_grad();
        h = b.forward(h, Pass::train(Stream::Input))?;
        shapes.push(h.shape().to_vec());
        secs[i] += start.elapsed().as_secs_f64();
    }
    let cls = net
        .classifier
        .as_mut()
        .ok_or_else(|| Error::Config("backpropagation needs the classifier layer".into()))?;
    let start = Instant::now();
    cls.w.zero_grad();
    cls.b.zero_grad();
    let logits = cls.forward(h.flatten2(), Pass::train(Stream::Input))?;
    let (loss, d, correct) = softmax_ce(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("classifier loss".into()));
    }
    let mut grad = cls
        .backward(&d, Stream::Input, true)?
        .expect("input gradient requested");
    secs[depth] += start.elapsed().as_secs_f64();
    for i in (0..depth).rev() {
        let start = Instant::now();
        let g = grad.reshape(&shapes[i])?;
        match net.blocks[i].backward(&g, Stream::Input, i > 0)? {
            Some(next) => grad = next,
            None => grad = Tensor::zeros(&[0]),
        }
        secs[i] += start.elapsed().as_secs_f64();
    }
    Ok((loss, correct, secs))
}

fn step_all<T: Scalar>(net: &mut Network<T>, ctx: &StepContext) {
    for b in &mut net.blocks {
        b.step(&ctx.adam, ctx.lr);
    }
    if let Some(c) = net.classifier.as_mut() {
        c.w.step(&ctx.adam, ctx.lr);
        c.b.step(&ctx.adam, ctx.lr);
    }
}

fn stats_for(
    index: usize,
    n: usize,
    loss: f64,
    correct: usize,
    secs: &[f64],
    peak: u64,
) -> Vec<LayerStat> {
    let last = secs.len() - 1;
    secs.iter()
        .enumerate()
        .map(|(layer, &s)| LayerStat {
            layer,
            batch: index,
            samples: n,
            loss: (layer == last).then_some(loss),
            correct: if layer == last { correct } else { 0 },
            secs: s,
            peak_bytes: if layer == last { peak } else { 0 },
        })
        .collect()
}

/// One backpropagation step. With feedback weights installed this is a
/// feedback-alignment step.
pub fn bp_step<T: Scalar>(
    net: &mut Network<T>,
    index: usize,
    x: &Tensor<T>,
    labels: &[usize],
    ctx: &StepContext,
) -> Result<Vec<LayerStat>> {
    let scope = MemoryScope::enter();
    let (loss, correct, secs) = bp_backward(net, x, labels)?;
    step_all(net, ctx);
    let secs: Vec<f64> = if ctx.timing {
        secs
    } else {
        vec![0.0; secs.len()]
    };
    Ok(stats_for(
        index,
        labels.len(),
        loss,
        correct,
        &secs,
        scope.peak(),
    ))
}

/// Trains only the classifier on features of the frozen hidden blocks.
pub fn shallow_step<T: Scalar>(
    net: &mut Network<T>,
    index: usize,
    x: &Tensor<T>,
    labels: &[usize],
    ctx: &StepContext,
) -> Result<Vec<LayerStat>> {
    let scope = MemoryScope::enter();
    let start = Instant::now();
    let h = net.forward_eval(x.clone())?;
    let fwd = start.elapsed().as_secs_f64();
    let cls = net
        .classifier
        .as_mut()
        .ok_or_else(|| Error::Config("shallow training needs the classifier layer".into()))?;
    let start = Instant::now();
    let (loss, correct) = crate::trainer::classifier_step(cls, &h, labels, ctx)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("classifier loss".into()));
    }
    let mut secs = vec![0.0; net.blocks.len() + 1];
    if ctx.timing {
        secs[0] = fwd;
        secs[net.blocks.len()] = start.elapsed().as_secs_f64();
    }
    Ok(stats_for(
        index,
        labels.len(),
        loss,
        correct,
        &secs,
        scope.peak(),
    ))
}

/// Cross-entropy of the classifier output after a training-mode forward
/// pass on a copy of the network (used by the finite-difference oracle).
pub fn bp_loss<T: Scalar>(net: &Network<T>, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut net = net.clone();
    let mut h = x.clone();
    for b in &mut net.blocks {
        h = b.forward(h, Pass::train(Stream::Input))?;
    }
    let cls = net
        .classifier
        .as_mut()
        .ok_or_else(|| Error::Config("no classifier layer".into()))?;
    let logits = cls.forward(h.flatten2(), Pass::eval(Stream::Input))?;
    Ok(softmax_ce(&logits, labels)?.0)
}
