use std::time::Instant;

use super::metrics::LayerStat;
use super::network::LoopContext;
use crate::error::{Error, Result};
use crate::layers::{Block, Dense, Layout, Mode, Pass, Stream};
use crate::optim::Adam;
use crate::signal::{
    pred_loss, softmax_ce, Comparator, LogitSign, Placement, TargetGenerator, Variant,
};
use crate::tensor::{MemoryScope, Scalar, Tensor};

/// Hyperparameters shared by every stage for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub lr: f64,
    pub adam: Adam,
    pub cmp: Comparator,
    pub sign: LogitSign,
    pub timing: bool,
}

/// A microbatch between blocks: detached activations and targets with
/// their class metadata.
#[derive(Debug)]
pub(crate) struct Flight<T: Scalar> {
    pub index: usize,
    pub h: Tensor<T>,
    /// `None` until the generator has run.
    pub t: Option<Tensor<T>>,
    pub labels: Vec<usize>,
    pub target_class: Vec<usize>,
    /// Layout of `t` as seen by the next block.
    pub layout: Layout,
    pub context: Option<LoopContext<T>>,
}

impl<T: Scalar> Flight<T> {
    pub fn new(
        index: usize,
        x: Tensor<T>,
        labels: Vec<usize>,
        context: Option<LoopContext<T>>,
    ) -> Self {
        Self {
            index,
            h: x,
            t: None,
            labels,
            target_class: Vec::new(),
            layout: Layout::Dense,
            context,
        }
    }
}

/// A contiguous run of blocks with exclusive ownership of their parameters.
/// The first stage also owns the generator, the last the classifier.
pub(crate) struct Stage<'a, T: Scalar> {
    pub offset: usize,
    pub blocks: &'a mut [Block<T>],
    pub generator: Option<&'a mut TargetGenerator<T>>,
    pub classifier: Option<&'a mut Dense<T>>,
}

fn non_finite(what: &str, layer: usize) -> Error {
    Error::NonFinite(format!("{what} at layer {layer}"))
}

impl<T: Scalar> Stage<'_, T> {
    /// Trains every block of the stage on one microbatch, in order, and
    /// returns the flight for the next stage.
    pub fn process(
        &mut self,
        mut f: Flight<T>,
        ctx: &StepContext,
        stats: &mut Vec<LayerStat>,
    ) -> Result<Flight<T>> {
        for j in 0..self.blocks.len() {
            let layer = self.offset + j;
            let scope = MemoryScope::enter();
            let start = ctx.timing.then(Instant::now);
            let n = f.labels.len();
            let gen = if layer == 0 {
                self.generator.as_deref_mut()
            } else {
                None
            };
            let (next, loss, correct) = sigprop_block(&mut self.blocks[j], gen, f, ctx, layer)?;
            f = next;
            stats.push(LayerStat {
                layer,
                batch: f.index,
                samples: n,
                loss: Some(loss),
                correct,
                secs: start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
                peak_bytes: scope.peak(),
            });
        }
        if let Some(cls) = self.classifier.as_deref_mut() {
            let layer = self.offset + self.blocks.len();
            let scope = MemoryScope::enter();
            let start = ctx.timing.then(Instant::now);
            let (loss, correct) = classifier_step(cls, &f.h, &f.labels, ctx)?;
            if !loss.is_finite() {
                return Err(non_finite("classifier loss", layer));
            }
            stats.push(LayerStat {
                layer,
                batch: f.index,
                samples: f.labels.len(),
                loss: Some(loss),
                correct,
                secs: start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
                peak_bytes: scope.peak(),
            });
        }
        Ok(f)
    }
}

/// Cross-entropy update of the classifier on detached features.
pub(crate) fn classifier_step<T: Scalar>(
    cls: &mut Dense<T>,
    h: &Tensor<T>,
    labels: &[usize],
    ctx: &StepContext,
) -> Result<(f64, usize)> {
    cls.w.zero_grad();
    cls.b.zero_grad();
    let logits = cls.forward(h.clone().flatten2(), Pass::train(Stream::Input))?;
    let (loss, d, correct) = softmax_ce(&logits, labels)?;
    cls.backward(&d, Stream::Input, false)?;
    cls.w.step(&ctx.adam, ctx.lr);
    cls.b.step(&ctx.adam, ctx.lr);
    Ok((loss, correct))
}

fn generate<T: Scalar>(
    gen: &mut TargetGenerator<T>,
    h1: &Tensor<T>,
    labels: &[usize],
    context: Option<&LoopContext<T>>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    match (gen.cfg.variant, context) {
        (Variant::TargetOnly, _) => gen.target_only(mode),
        (Variant::TargetInput, _) => gen.target_input(labels, h1, mode),
        (Variant::TargetLoopPred, Some(LoopContext::Pred(y))) => {
            gen.target_loop_pred(y, labels, mode)
        }
        (Variant::TargetLoopErr, Some(LoopContext::Err { h, e })) => {
            gen.target_loop_err(h, e, labels, mode)
        }
        (v, _) => Err(Error::Protocol(format!(
            "{v:?} generator needs a completed forward output of the batch"
        ))),
    }
}

/// Forward, local loss and immediate update of one block.
fn sigprop_block<T: Scalar>(
    block: &mut Block<T>,
    mut gen: Option<&mut TargetGenerator<T>>,
    f: Flight<T>,
    ctx: &StepContext,
    layer: usize,
) -> Result<(Flight<T>, f64, usize)> {
    let Flight {
        index,
        h: x,
        t,
        labels,
        mut target_class,
        layout,
        context,
    } = f;
    block.zero_grad();
    let h = block.forward(x, Pass::train(Stream::Input))?;

    let (t, through_block, out_layout) = match gen.as_deref_mut() {
        Some(g) => {
            g.zero_grad();
            let (t0, tc) = generate(g, &h, &labels, context.as_ref(), Mode::Train)?;
            target_class = tc;
            match g.cfg.placement {
                Placement::FirstHidden => (t0, false, g.layout()),
                Placement::Input => {
                    let pass = Pass::train(Stream::Target).with_layout(g.layout());
                    (block.forward(t0, pass)?, true, Layout::Dense)
                }
            }
        }
        None => {
            let t =
                t.ok_or_else(|| Error::Protocol(format!("no targets reached layer {layer}")))?;
            let pass = Pass::train(Stream::Target).with_layout(layout);
            (block.forward(t, pass)?, true, Layout::Dense)
        }
    };

    let out = pred_loss(&h, &t, &labels, &target_class, ctx.cmp, ctx.sign)?;
    if !out.loss.is_finite() {
        return Err(non_finite("local loss", layer));
    }
    let mut dh = out.dh;
    if through_block {
        let need = gen.is_some();
        let dt0 = block.backward(&out.dt, Stream::Target, need)?;
        if let (Some(g), Some(dt0)) = (gen.as_deref_mut(), dt0) {
            g.backward(&dt0)?;
        }
    } else if let Some(g) = gen.as_deref_mut() {
        if let Some(extra) = g.backward(&out.dt)? {
            dh.add_assign(&extra.reshape(dh.shape())?)?;
        }
    }
    block.backward(&dh, Stream::Input, false)?;
    block.step(&ctx.adam, ctx.lr);
    if let Some(g) = gen {
        g.step(&ctx.adam, ctx.lr);
    }
    let next = Flight {
        index,
        h,
        t: Some(t),
        labels,
        target_class,
        layout: out_layout,
        context: None,
    };
    Ok((next, out.loss, out.correct))
}
