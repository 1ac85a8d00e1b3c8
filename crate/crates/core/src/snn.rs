//! Spiking convolutional network of integrate-and-fire nodes, trained with
//! layer-local losses on pre-spike quantities or by backpropagation through
//! time with a surrogate spike derivative.
//!
//! Activations of all time steps are stacked time-major along the batch axis
//! (`[T·n, ...]`), so affine ops and batch normalization see every step at
//! once and only the integrate-and-fire recurrence walks through time.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Block, Conv2d, Dense, Flatten, MaxPool, Mode, Op, Pass, Stream};
use crate::optim::{cosine_lr, Adam};
use crate::signal::{
    pred_loss, softmax_ce, Comparator, GeneratorConfig, LogitSign, Placement, SparseSpec,
    TargetGenerator, Variant,
};
use crate::tensor::{flush_subnormals, s, MemoryScope, RngStream, Scalar, Tensor};
use crate::trainer::{classifier_step, EpochStats, LayerStat, MetricRow, StepContext};

/// Learning rule of a spiking run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnnMode {
    /// Local losses on the surrogate rate `g(v − θ)`.
    #[default]
    SpSurrogate,
    /// Local losses on the membrane voltage itself.
    SpVoltage,
    /// Backpropagation through time with `g′` standing in for the spike
    /// derivative.
    BpSurrogate,
    /// Only the classifier learns.
    Shallow,
}

impl SnnMode {
    pub fn is_sigprop(self) -> bool {
        matches!(self, Self::SpSurrogate | Self::SpVoltage)
    }

    pub fn default_threshold(self) -> f64 {
        if self.is_sigprop() {
            0.5
        } else {
            1.0
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::SpSurrogate => "snn_sp_surrogate",
            Self::SpVoltage => "snn_sp_voltage",
            Self::BpSurrogate => "snn_bp_surrogate",
            Self::Shallow => "snn_shallow",
        }
    }
}

/// What happens to the voltage of a neuron that spiked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reset {
    /// Subtract the threshold.
    #[default]
    Soft,
    /// Set to zero.
    Hard,
}

/// Arctan surrogate of the spike and its derivative.
pub fn surrogate<T: Scalar>(x: T) -> (T, T) {
    let pi: T = s(PI);
    let px = pi * x;
    (px.atan() / pi + s(0.5), T::one() / (T::one() + px * px))
}

/// Membrane voltages of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IfState<T: Scalar> {
    pub v: Tensor<T>,
    pub threshold: T,
    pub reset: Reset,
}

impl<T: Scalar> IfState<T> {
    pub fn new(shape: &[usize], threshold: T, reset: Reset) -> Self {
        Self {
            v: Tensor::zeros(shape),
            threshold,
            reset,
        }
    }

    /// Integrates `h`, fires where the voltage reaches the threshold and
    /// resets the neurons that fired. Returns the pre-reset voltage and the
    /// spikes.
    pub fn step(&mut self, h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if h.shape() != self.v.shape() {
            return Err(Error::dim("if_step", h.shape(), self.v.shape()));
        }
        let mut v_pre = self.v.clone();
        v_pre.add_assign(h)?;
        let spikes = v_pre.map(|v| {
            if v >= self.threshold {
                T::one()
            } else {
                T::zero()
            }
        });
        for ((v, &pre), &sp) in self
            .v
            .data_mut()
            .iter_mut()
            .zip(v_pre.data())
            .zip(spikes.data())
        {
            *v = reset_voltage(pre, sp, self.threshold, self.reset);
        }
        Ok((v_pre, spikes))
    }
}

fn reset_voltage<T: Scalar>(v_pre: T, spike: T, threshold: T, reset: Reset) -> T {
    match reset {
        Reset::Soft => v_pre - threshold * spike,
        Reset::Hard => v_pre * (T::one() - spike),
    }
}

/// How a neuron's output is formed from its voltage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Firing {
    Spike,
    /// `g(v − θ)` in place of the step: a differentiable stand-in used to
    /// check the unrolled gradient.
    Smooth,
}

/// Integrate-and-fire over `steps` time-major slices of `h`.
fn unroll<T: Scalar>(
    h: &Tensor<T>,
    steps: usize,
    threshold: T,
    reset: Reset,
    firing: Firing,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if steps == 0 || h.len() % steps != 0 {
        return Err(Error::Argument(format!(
            "{} values do not split into {steps} steps",
            h.len()
        )));
    }
    let chunk = h.len() / steps;
    let mut v = vec![T::zero(); chunk];
    let mut v_pre = Vec::with_capacity(h.len());
    let mut spikes = Vec::with_capacity(h.len());
    for slice in h.data().chunks(chunk) {
        for (vi, &hi) in v.iter_mut().zip(slice) {
            let pre = *vi + hi;
            let sp = match firing {
                Firing::Spike if pre >= threshold => T::one(),
                Firing::Spike => T::zero(),
                Firing::Smooth => surrogate(pre - threshold).0,
            };
            *vi = reset_voltage(pre, sp, threshold, reset);
            v_pre.push(pre);
            spikes.push(sp);
        }
    }
    Ok((
        Tensor::new(h.shape(), v_pre)?,
        Tensor::new(h.shape(), spikes)?,
    ))
}

/// Gradient reaching every step's input `h` given the gradient `direct`
/// on each step's pre-reset voltage and `carry`, the factor by which the
/// post-reset voltage depends on the pre-reset one.
fn through_time<T: Scalar>(direct: &[T], carry: &[T], steps: usize) -> Vec<T> {
    let chunk = direct.len() / steps;
    let mut out = vec![T::zero(); direct.len()];
    let mut next = vec![T::zero(); chunk];
    for t in (0..steps).rev() {
        let r = t * chunk..(t + 1) * chunk;
        for (((o, nx), &d), &c) in out[r.clone()]
            .iter_mut()
            .zip(next.iter_mut())
            .zip(&direct[r.clone()])
            .zip(&carry[r])
        {
            let g = d + *nx * c;
            *o = g;
            *nx = g;
        }
    }
    out
}

fn repeat_time<T: Scalar>(x: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let parts: Vec<&Tensor<T>> = std::iter::repeat_n(x, steps).collect();
    Tensor::concat_rows(&parts)
}

/// Sum over the time-major slices of `x`.
fn time_sum<T: Scalar>(x: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let chunk = x.len() / steps;
    let mut out = vec![T::zero(); chunk];
    for slice in x.data().chunks(chunk) {
        for (o, &v) in out.iter_mut().zip(slice) {
            *o += v;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] /= steps;
    Tensor::new(&shape, out)
}

fn time_mean<T: Scalar>(x: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    Ok(time_sum(x, steps)?.scale(s(1.0 / steps as f64)))
}

fn time_slice<T: Scalar>(x: &Tensor<T>, steps: usize, t: usize) -> Result<Tensor<T>> {
    let chunk = x.len() / steps;
    let mut shape = x.shape().to_vec();
    shape[0] /= steps;
    Tensor::new(&shape, x.data()[t * chunk..(t + 1) * chunk].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnnConfig {
    pub dataset: String,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub mode: SnnMode,
    pub timesteps: usize,
    /// Firing threshold; defaults to 0.5 for sigprop and 1.0 otherwise.
    pub threshold: Option<f64>,
    pub reset: Reset,
    /// Conv blocks, each followed by 2×2 max pooling.
    pub channels: Vec<usize>,
    pub fc_hidden: Vec<usize>,
    pub batchnorm: bool,
    pub lr: f64,
    pub min_lr: f64,
    /// Cosine annealing period in epochs.
    pub t_max: usize,
    pub epochs: usize,
    pub batch: usize,
    pub adam: Adam,
    pub seed: u64,
    pub slope: f64,
    pub comparator: Comparator,
    pub logit_sign: LogitSign,
    pub record_timing: bool,
    /// Evaluate on the test set after every epoch rather than only the last.
    pub eval_each_epoch: bool,
}

impl Default for SnnConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            train_subset: None,
            test_subset: None,
            mode: SnnMode::SpSurrogate,
            timesteps: 4,
            threshold: None,
            reset: Reset::Soft,
            channels: vec![16, 32],
            fc_hidden: vec![256],
            batchnorm: true,
            lr: 5e-4,
            min_lr: 0.0,
            t_max: 64,
            epochs: 64,
            batch: 128,
            adam: Adam::default(),
            seed: 0,
            slope: 0.01,
            comparator: Comparator::Dot,
            logit_sign: LogitSign::Similarity,
            record_timing: true,
            eval_each_epoch: true,
        }
    }
}

impl SnnConfig {
    pub fn threshold(&self) -> f64 {
        self.threshold
            .unwrap_or_else(|| self.mode.default_threshold())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1".into());
        }
        if !(self.threshold() > 0.0) {
            return bad(format!(
                "threshold must be positive, got {}",
                self.threshold()
            ));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return bad(format!(
                "need 0 <= min_lr <= lr with lr > 0, got {} and {}",
                self.min_lr, self.lr
            ));
        }
        if self.epochs == 0 || self.batch == 0 || self.t_max == 0 {
            return bad("epochs, batch and t_max must be at least 1".into());
        }
        if self.channels.is_empty() && self.fc_hidden.is_empty() {
            return bad("network needs at least one spiking layer".into());
        }
        if self.channels.contains(&0) || self.fc_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// Spiking network: conv blocks with pooling, fully connected blocks, and a
/// classifier reading the spike counts of the last layer averaged over time.
#[derive(Debug, Clone)]
pub struct SnnNet<T: Scalar> {
    pub blocks: Vec<Block<T>>,
    pub pools: Vec<Option<MaxPool>>,
    pub classifier: Dense<T>,
    /// Label-only targets in the input space.
    pub generator: TargetGenerator<T>,
    pub timesteps: usize,
    pub threshold: f64,
    pub reset: Reset,
    pub classes: usize,
    pub input_shape: Vec<usize>,
    /// Times a surrogate derivative was taken across a spike.
    pub spike_derivatives: u64,
}

impl<T: Scalar> SnnNet<T> {
    pub fn build(cfg: &SnnConfig, image_shape: &[usize], classes: usize) -> Result<Self> {
        cfg.validate()?;
        let [c, h, w] = <[usize; 3]>::try_from(image_shape).map_err(|_| {
            Error::Config(format!("expected a [c, h, w] image, got {image_shape:?}"))
        })?;
        let root = RngStream::new(cfg.seed);
        let mut blocks = Vec::new();
        let mut pools = Vec::new();
        let (mut ch, mut side_h, mut side_w) = (c, h, w);
        for (i, &out) in cfg.channels.iter().enumerate() {
            let mut rng = root.fork(1 + i as u64);
            let mut ops = vec![Op::Conv(Conv2d::new(ch, out, 3, 1, 1, cfg.slope, &mut rng))];
            if cfg.batchnorm {
                ops.push(Op::BatchNorm(BatchNorm::new(out)));
            }
            blocks.push(Block::new(ops));
            if side_h < 2 || side_w < 2 {
                return Err(Error::Config(format!(
                    "image too small for {} pooled conv blocks",
                    cfg.channels.len()
                )));
            }
            pools.push(Some(MaxPool::new(2)?));
            ch = out;
            side_h /= 2;
            side_w /= 2;
        }
        let mut width = ch * side_h * side_w;
        for (j, &out) in cfg.fc_hidden.iter().enumerate() {
            let mut rng = root.fork(1 + (cfg.channels.len() + j) as u64);
            let mut ops = Vec::new();
            if j == 0 {
                ops.push(Op::Flatten(Flatten::new()));
            }
            ops.push(Op::Dense(Dense::new(width, out, cfg.slope, &mut rng)));
            blocks.push(Block::new(ops));
            pools.push(None);
            width = out;
        }
        let classifier = Dense::new(width, classes, cfg.slope, &mut root.fork(100));
        let gen_cfg = GeneratorConfig {
            variant: Variant::TargetOnly,
            placement: Placement::Input,
            sparse: SparseSpec::Dense,
            slope: cfg.slope,
            eta: 1.0,
        };
        let generator =
            TargetGenerator::new(gen_cfg, classes, classes, image_shape, &mut root.fork(200))?;
        Ok(Self {
            blocks,
            pools,
            classifier,
            generator,
            timesteps: cfg.timesteps,
            threshold: cfg.threshold(),
            reset: cfg.reset,
            classes,
            input_shape: image_shape.to_vec(),
            spike_derivatives: 0,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().get(1..) != Some(&self.input_shape[..]) {
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::dim("snn input", x.shape(), &want));
        }
        Ok(())
    }

    fn pool(&mut self, i: usize, spikes: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        match self.pools[i].as_mut() {
            Some(p) => p.forward(spikes, pass),
            None => Ok(spikes),
        }
    }

    /// Spike counts of the last layer averaged over time, with the
    /// pre-reset voltages and spikes of every layer.
    fn forward_all(
        &mut self,
        x: &Tensor<T>,
        pass: Pass,
        firing: Firing,
    ) -> Result<(Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>)> {
        self.check_input(x)?;
        let theta: T = s(self.threshold);
        let mut h = repeat_time(x, self.timesteps)?;
        let mut record = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let a = self.blocks[i].forward(h, pass)?;
            let (v, sp) = unroll(&a, self.timesteps, theta, self.reset, firing)?;
            h = self.pool(i, sp.clone(), pass)?;
            record.push((v, sp));
        }
        Ok((time_mean(&h.flatten2(), self.timesteps)?, record))
    }

    /// Logits in evaluation mode.
    pub fn logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (feats, _) = self.forward_all(x, Pass::eval(Stream::Input), Firing::Spike)?;
        self.classifier.forward(feats, Pass::eval(Stream::Input))
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(Block::zero_grad);
        self.classifier.w.zero_grad();
        self.classifier.b.zero_grad();
        self.generator.zero_grad();
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::layers::Param<T>> {
        let mut out: Vec<_> = self.blocks.iter_mut().flat_map(Block::params_mut).collect();
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out.extend(self.generator.params_mut());
        out
    }

    pub fn cached_entries(&self) -> usize {
        self.blocks.iter().map(Block::cached_entries).sum::<usize>()
            + self.generator.cached_entries()
    }

    pub fn checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint<T> {
        let mut tensors: Vec<(String, Tensor<T>)> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named_tensors(&format!("block{i}")))
            .collect();
        tensors.push(("classifier.w".into(), self.classifier.w.value.clone()));
        tensors.push(("classifier.b".into(), self.classifier.b.value.clone()));
        tensors.extend(
            self.generator
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p.value.clone())),
        );
        Checkpoint {
            seed,
            epoch,
            tensors,
        }
    }

    /// Local loss of one layer summed over time steps and divided by `T`.
    /// Returns the loss, correct predictions at the last step, and the
    /// gradients on the input and target voltages.
    fn local_loss(
        &self,
        vh: &Tensor<T>,
        vt: &Tensor<T>,
        labels: &[usize],
        target_class: &[usize],
        ctx: &StepContext,
        surrogate_rate: bool,
    ) -> Result<(f64, usize, Tensor<T>, Tensor<T>)> {
        let steps = self.timesteps;
        let theta: T = s(self.threshold);
        let inv_t: T = s(1.0 / steps as f64);
        let read = |v: &Tensor<T>| -> (Tensor<T>, Tensor<T>) {
            if surrogate_rate {
                let pairs: Vec<(T, T)> = v.data().iter().map(|&x| surrogate(x - theta)).collect();
                let g = Tensor::new(v.shape(), pairs.iter().map(|p| p.0).collect())
                    .expect("same shape");
                let dg = Tensor::new(v.shape(), pairs.iter().map(|p| p.1).collect())
                    .expect("same shape");
                (g, dg)
            } else {
                (v.clone(), Tensor::full(v.shape(), T::one()))
            }
        };
        let (mut dvh, mut dvt) = (Vec::with_capacity(vh.len()), Vec::with_capacity(vt.len()));
        let (mut loss, mut correct) = (0.0, 0);
        for t in 0..steps {
            let (rh, dh) = read(&time_slice(vh, steps, t)?);
            let (rt, dt) = read(&time_slice(vt, steps, t)?);
            let out = pred_loss(&rh, &rt, labels, target_class, ctx.cmp, ctx.sign)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("spiking local loss at step {t}")));
            }
            loss += out.loss / steps as f64;
            correct = out.correct;
            dvh.extend(
                out.dh
                    .data()
                    .iter()
                    .zip(dh.data())
                    .map(|(&g, &d)| g * d * inv_t),
            );
            dvt.extend(
                out.dt
                    .data()
                    .iter()
                    .zip(dt.data())
                    .map(|(&g, &d)| g * d * inv_t),
            );
        }
        Ok((
            loss,
            correct,
            Tensor::new(vh.shape(), dvh)?,
            Tensor::new(vt.shape(), dvt)?,
        ))
    }

    /// Gradient on a layer's pre-activation from gradients on its voltages,
    /// holding the spikes (and therefore the resets) fixed.
    fn voltage_to_input(&self, dv: &Tensor<T>, spikes: &Tensor<T>) -> Result<Tensor<T>> {
        let carry: Vec<T> = match self.reset {
            Reset::Soft => vec![T::one(); dv.len()],
            Reset::Hard => spikes.data().iter().map(|&sp| T::one() - sp).collect(),
        };
        Tensor::new(dv.shape(), through_time(dv.data(), &carry, self.timesteps))
    }

    /// Sigprop step: every layer learns from its own loss on the voltages of
    /// the input and target streams; spikes only ever travel forward.
    pub fn sp_step(
        &mut self,
        index: usize,
        x: &Tensor<T>,
        labels: &[usize],
        ctx: &StepContext,
        surrogate_rate: bool,
    ) -> Result<Vec<LayerStat>> {
        self.check_input(x)?;
        let steps = self.timesteps;
        let theta: T = s(self.threshold);
        let n = labels.len();
        let mut stats = Vec::with_capacity(self.blocks.len() + 1);
        let (t0, target_class) = self.generator.target_only(Mode::Train)?;
        let mut h = repeat_time(x, steps)?;
        let mut t = repeat_time(&t0, steps)?;
        for i in 0..self.blocks.len() {
            let scope = MemoryScope::enter();
            let start = Instant::now();
            let block = &mut self.blocks[i];
            block.zero_grad();
            let a = block.forward(h, Pass::train(Stream::Input))?;
            let at = block.forward(t, Pass::train(Stream::Target))?;
            let (vh, sh) = unroll(&a, steps, theta, self.reset, Firing::Spike)?;
            let (vt, st) = unroll(&at, steps, theta, self.reset, Firing::Spike)?;
            let (loss, correct, dvh, dvt) =
                self.local_loss(&vh, &vt, labels, &target_class, ctx, surrogate_rate)?;
            let dh = self.voltage_to_input(&dvh, &sh)?;
            let dt = self.voltage_to_input(&dvt, &st)?;
            let block = &mut self.blocks[i];
            let dt0 = block.backward(&dt, Stream::Target, i == 0)?;
            block.backward(&dh, Stream::Input, false)?;
            block.step(&ctx.adam, ctx.lr);
            if i == 0 {
                let dt0 = dt0.ok_or_else(|| {
                    Error::Protocol("first block returned no target gradient".into())
                })?;
                self.generator.zero_grad();
                self.generator.backward(&time_sum(&dt0, steps)?)?;
                self.generator.step(&ctx.adam, ctx.lr);
            }
            h = self.pool(i, sh, Pass::eval(Stream::Input))?;
            t = self.pool(i, st, Pass::eval(Stream::Target))?;
            stats.push(LayerStat {
                layer: i,
                batch: index,
                samples: n,
                loss: Some(loss),
                correct,
                secs: if ctx.timing {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                peak_bytes: scope.peak(),
            });
        }
        stats.push(self.classifier_stat(index, &h, labels, ctx)?);
        Ok(stats)
    }

    fn classifier_stat(
        &mut self,
        index: usize,
        h: &Tensor<T>,
        labels: &[usize],
        ctx: &StepContext,
    ) -> Result<LayerStat> {
        let scope = MemoryScope::enter();
        let start = Instant::now();
        let feats = time_mean(&h.clone().flatten2(), self.timesteps)?;
        let (loss, correct) = classifier_step(&mut self.classifier, &feats, labels, ctx)?;
        Ok(LayerStat {
            layer: self.blocks.len(),
            batch: index,
            samples: labels.len(),
            loss: Some(loss),
            correct,
            secs: if ctx.timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            peak_bytes: scope.peak(),
        })
    }

    /// Classifier step on the spikes of frozen blocks. The blocks still
    /// normalize with batch statistics.
    pub fn shallow_step(
        &mut self,
        index: usize,
        x: &Tensor<T>,
        labels: &[usize],
        ctx: &StepContext,
    ) -> Result<Vec<LayerStat>> {
        self.check_input(x)?;
        let theta: T = s(self.threshold);
        let mut h = repeat_time(x, self.timesteps)?;
        for i in 0..self.blocks.len() {
            let a = self.blocks[i].forward(h, Pass::train(Stream::Input))?;
            self.blocks[i].discard(Stream::Input)?;
            let (_, sp) = unroll(&a, self.timesteps, theta, self.reset, Firing::Spike)?;
            h = self.pool(i, sp, Pass::eval(Stream::Input))?;
        }
        Ok(vec![self.classifier_stat(index, &h, labels, ctx)?])
    }

    /// Accumulates the unrolled gradient of the mean cross-entropy of the
    /// time-averaged logits. Returns the loss and correct predictions.
    pub(crate) fn bp_backward(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        firing: Firing,
    ) -> Result<(f64, usize)> {
        let steps = self.timesteps;
        let theta: T = s(self.threshold);
        let (feats, record) = self.forward_all(x, Pass::train(Stream::Input), firing)?;
        let logits = self.classifier.forward(feats, Pass::train(Stream::Input))?;
        let (loss, dlogits, correct) = softmax_ce(&logits, labels)?;
        let dfeats = self
            .classifier
            .backward(&dlogits, Stream::Input, true)?
            .ok_or_else(|| Error::Protocol("classifier returned no input gradient".into()))?;
        let mut ds = repeat_time(&dfeats, steps)?.scale(s(1.0 / steps as f64));
        for i in (0..self.blocks.len()).rev() {
            if let Some(p) = self.pools[i].as_mut() {
                ds = p.backward(&ds, Stream::Input)?;
            }
            let (v, sp) = &record[i];
            let ds_v = ds.reshape(v.shape())?;
            let mut direct = Vec::with_capacity(v.len());
            let mut carry = Vec::with_capacity(v.len());
            for ((&vp, &spk), &g) in v.data().iter().zip(sp.data()).zip(ds_v.data()) {
                let (_, dg) = surrogate(vp - theta);
                direct.push(g * dg);
                carry.push(match self.reset {
                    Reset::Soft => T::one() - theta * dg,
                    Reset::Hard => T::one() - spk - vp * dg,
                });
            }
            self.spike_derivatives += 1;
            let da = Tensor::new(v.shape(), through_time(&direct, &carry, steps))?;
            match self.blocks[i].backward(&da, Stream::Input, i > 0)? {
                Some(dx) if i > 0 => ds = dx,
                _ => break,
            }
        }
        Ok((loss, correct))
    }

    /// Backpropagation through time over every layer.
    pub fn bp_step(
        &mut self,
        index: usize,
        x: &Tensor<T>,
        labels: &[usize],
        ctx: &StepContext,
    ) -> Result<Vec<LayerStat>> {
        let scope = MemoryScope::enter();
        let start = Instant::now();
        self.zero_grad();
        let (loss, correct) = self.bp_backward(x, labels, Firing::Spike)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("spiking classifier loss".into()));
        }
        for b in &mut self.blocks {
            b.step(&ctx.adam, ctx.lr);
        }
        self.classifier.w.step(&ctx.adam, ctx.lr);
        self.classifier.b.step(&ctx.adam, ctx.lr);
        Ok(vec![LayerStat {
            layer: self.blocks.len(),
            batch: index,
            samples: labels.len(),
            loss: Some(loss),
            correct,
            secs: if ctx.timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            peak_bytes: scope.peak(),
        }])
    }

    /// Loss of the smoothed model with training-mode normalization, for
    /// finite-difference checks of [`Self::bp_backward`].
    pub(crate) fn smooth_loss(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let (feats, _) = self.forward_all(x, Pass::train(Stream::Input), Firing::Smooth)?;
        let logits = self.classifier.forward(feats, Pass::eval(Stream::Input))?;
        self.blocks.iter_mut().for_each(Block::clear_cache);
        self.pools
            .iter_mut()
            .flatten()
            .for_each(|p| p.cache.clear());
        Ok(softmax_ce(&logits, labels)?.0)
    }

    pub fn evaluate(&mut self, ds: &Dataset, batch: usize) -> Result<f64> {
        let mut wrong = 0;
        for idx in ds.batches_in_order(batch) {
            let (x, labels) = ds.batch::<T>(&idx);
            let pred = self.logits(&x)?.argmax_rows();
            wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
        }
        Ok(if ds.is_empty() {
            0.0
        } else {
            wrong as f64 / ds.len() as f64
        })
    }
}

#[derive(Debug, Clone)]
pub struct SnnReport {
    pub rows: Vec<MetricRow>,
    pub test_err: f64,
    pub train_err: Option<f64>,
    pub wall_s: f64,
}

/// Trains a spiking network with the learning rule of `cfg.mode`.
pub fn snn_fit<T: Scalar>(
    net: &mut SnnNet<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &SnnConfig,
    mut on_epoch: impl FnMut(&[MetricRow]),
) -> Result<SnnReport> {
    cfg.validate()?;
    flush_subnormals();
    if train.image_shape()[..] != net.input_shape[..] {
        return Err(Error::Config(format!(
            "images of shape {:?} do not fit the network input {:?}",
            train.image_shape(),
            net.input_shape
        )));
    }
    let started = Instant::now();
    let root = RngStream::new(cfg.seed);
    let mode = cfg.mode.label();
    let depth = net.blocks.len();
    let mut rows = Vec::new();
    let (mut test_err, mut train_err) = (None, None);
    for epoch in 0..cfg.epochs {
        let ctx = StepContext {
            lr: cosine_lr(cfg.lr, cfg.min_lr, epoch, cfg.t_max),
            adam: cfg.adam,
            cmp: cfg.comparator,
            sign: cfg.logit_sign,
            timing: cfg.record_timing,
        };
        let shuffle = root.fork(1000 + epoch as u64).next_u64();
        let mut stats = EpochStats::default();
        let start = Instant::now();
        for (i, idx) in train.batches(cfg.batch, shuffle).enumerate() {
            let (x, labels) = train.batch::<T>(&idx);
            stats.samples += labels.len();
            let local = match cfg.mode {
                SnnMode::SpSurrogate => net.sp_step(i, &x, &labels, &ctx, true)?,
                SnnMode::SpVoltage => net.sp_step(i, &x, &labels, &ctx, false)?,
                SnnMode::BpSurrogate => net.bp_step(i, &x, &labels, &ctx)?,
                SnnMode::Shallow => net.shallow_step(i, &x, &labels, &ctx)?,
            };
            let step_peak = local.iter().map(|s| s.peak_bytes).max().unwrap_or(0);
            stats.step_peak = stats.step_peak.max(step_peak);
            stats.extend(local);
        }
        if ctx.timing {
            stats.step_secs = start.elapsed().as_secs_f64();
        }
        if cfg.eval_each_epoch || epoch + 1 == cfg.epochs {
            test_err = Some(net.evaluate(test, 256)?);
        }
        let totals = stats.totals();
        let timing = |v: f64| cfg.record_timing.then_some(v);
        let mut epoch_rows = Vec::new();
        for (layer, t) in totals.iter().enumerate() {
            if t.samples == 0 {
                continue;
            }
            let is_cls = layer == depth;
            epoch_rows.push(MetricRow {
                mode: mode.into(),
                epoch,
                layer: if is_cls {
                    "classifier".into()
                } else {
                    layer.to_string()
                },
                loss: t.mean_loss(),
                time_per_sample_s: timing(t.time_per_sample()),
                peak_bytes: t.peak_bytes,
                train_err: t.train_err(),
                test_err: test_err.filter(|_| is_cls),
            });
        }
        train_err = totals.get(depth).and_then(|t| t.train_err());
        let loss = if cfg.mode.is_sigprop() {
            Some(
                totals
                    .iter()
                    .take(depth)
                    .filter_map(|t| t.mean_loss())
                    .sum(),
            )
        } else {
            totals.get(depth).and_then(|t| t.mean_loss())
        };
        epoch_rows.push(MetricRow {
            mode: mode.into(),
            epoch,
            layer: "step".into(),
            loss,
            time_per_sample_s: timing(stats.step_secs / stats.samples.max(1) as f64),
            peak_bytes: stats.step_peak,
            train_err,
            test_err,
        });
        on_epoch(&epoch_rows);
        rows.extend(epoch_rows);
    }
    Ok(SnnReport {
        rows,
        test_err: test_err.expect("last epoch evaluates"),
        train_err,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: SnnMode, seed: u64) -> SnnNet<f64> {
        let cfg = SnnConfig {
            mode,
            channels: vec![2],
            fc_hidden: vec![6],
            seed,
            ..SnnConfig::default()
        };
        SnnNet::build(&cfg, &[1, 4, 4], 3).unwrap()
    }

    fn batch(seed: u64, n: usize) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let x = Tensor::from_fn(&[n, 1, 4, 4], |_| rng.uniform(0.0, 1.0));
        (x, (0..n).map(|i| i % 3).collect())
    }

    fn ctx(lr: f64) -> StepContext {
        StepContext {
            lr,
            adam: Adam::default(),
            cmp: Comparator::Dot,
            sign: LogitSign::Similarity,
            timing: false,
        }
    }

    fn first_spike(h: f64, threshold: f64) -> Option<usize> {
        let mut st = IfState::new(&[1], threshold, Reset::Soft);
        let h = Tensor::full(&[1], h);
        (1..=6).find(|_| st.step(&h).unwrap().1.data()[0] == 1.0)
    }

    #[test]
    fn if_neuron_fires_on_schedule() {
        assert_eq!(first_spike(0.0, 0.5), None);
        assert_eq!(first_spike(0.3, 0.5), Some(2));
        assert_eq!(first_spike(0.3, 1.0), Some(4));
    }

    #[test]
    fn resets_after_a_spike() {
        let h = Tensor::full(&[1], 0.7);
        let mut soft = IfState::<f64>::new(&[1], 0.5, Reset::Soft);
        let (v, sp) = soft.step(&h).unwrap();
        assert_eq!((v.data()[0], sp.data()[0]), (0.7, 1.0));
        assert!((soft.v.data()[0] - 0.2).abs() < 1e-12);
        let mut hard = IfState::new(&[1], 0.5, Reset::Hard);
        hard.step(&h).unwrap();
        assert_eq!(hard.v.data()[0], 0.0);
    }

    #[test]
    fn unroll_agrees_with_stepping() {
        let mut rng = RngStream::new(3);
        let h = Tensor::from_fn(&[3 * 2, 5], |_| rng.uniform(-0.2, 0.8));
        for reset in [Reset::Soft, Reset::Hard] {
            let (v, sp) = unroll(&h, 3, 0.5, reset, Firing::Spike).unwrap();
            let mut st = IfState::new(&[2, 5], 0.5, reset);
            for t in 0..3 {
                let (vt, st_sp) = st.step(&time_slice(&h, 3, t).unwrap()).unwrap();
                assert_eq!(vt, time_slice(&v, 3, t).unwrap());
                assert_eq!(st_sp, time_slice(&sp, 3, t).unwrap());
            }
        }
    }

    #[test]
    fn spike_count_grows_with_drive() {
        let count = |h: f64| {
            let mut st = IfState::new(&[1], 1.0, Reset::Soft);
            let h = Tensor::full(&[1], h);
            (0..16)
                .map(|_| st.step(&h).unwrap().1.data()[0])
                .sum::<f64>()
        };
        let mut last = 0.0;
        for k in 0..40 {
            let c = count(k as f64 * 0.05);
            assert!(c >= last);
            last = c;
        }
        assert_eq!(last, 16.0);
    }

    #[test]
    fn surrogate_identities() {
        for &x in &[-3.0, -0.4, 0.0, 0.2, 5.0f64] {
            let (g, dg) = surrogate(x);
            let (gm, _) = surrogate(-x);
            assert!((g + gm - 1.0).abs() < 1e-12);
            let h = 1e-6;
            let fd = (surrogate(x + h).0 - surrogate(x - h).0) / (2.0 * h);
            assert!((fd - dg).abs() < 1e-8);
        }
        assert_eq!(surrogate(0.0f64), (0.5, 1.0));
    }

    #[test]
    fn through_time_with_unit_carry_is_a_suffix_sum() {
        let out = through_time(&[1.0, 2.0, 4.0f64], &[1.0; 3], 3);
        assert_eq!(out, vec![7.0, 6.0, 4.0]);
        let out = through_time(&[1.0, 2.0, 4.0f64], &[0.5, 0.0, 1.0], 3);
        assert_eq!(out, vec![2.0, 2.0, 4.0]);
    }

    #[test]
    fn sigprop_never_differentiates_a_spike() {
        for mode in [SnnMode::SpSurrogate, SnnMode::SpVoltage] {
            let mut net = tiny(mode, 1);
            let (x, labels) = batch(2, 6);
            net.sp_step(0, &x, &labels, &ctx(1e-3), mode == SnnMode::SpSurrogate)
                .unwrap();
            assert_eq!(net.spike_derivatives, 0);
            assert_eq!(net.cached_entries(), 0);
        }
        let mut net = tiny(SnnMode::BpSurrogate, 1);
        let (x, labels) = batch(2, 6);
        net.bp_step(0, &x, &labels, &ctx(1e-3)).unwrap();
        assert!(net.spike_derivatives > 0);
    }

    #[test]
    fn zero_lr_leaves_every_weight_alone() {
        for mode in [
            SnnMode::SpSurrogate,
            SnnMode::SpVoltage,
            SnnMode::BpSurrogate,
            SnnMode::Shallow,
        ] {
            let mut net = tiny(mode, 4);
            let before: Vec<Vec<f64>> = net
                .params_mut()
                .iter()
                .map(|p| p.value.data().to_vec())
                .collect();
            let (x, labels) = batch(5, 6);
            let c = ctx(0.0);
            match mode {
                SnnMode::SpSurrogate => net.sp_step(0, &x, &labels, &c, true),
                SnnMode::SpVoltage => net.sp_step(0, &x, &labels, &c, false),
                SnnMode::BpSurrogate => net.bp_step(0, &x, &labels, &c),
                SnnMode::Shallow => net.shallow_step(0, &x, &labels, &c),
            }
            .unwrap();
            let after: Vec<Vec<f64>> = net
                .params_mut()
                .iter()
                .map(|p| p.value.data().to_vec())
                .collect();
            assert_eq!(before, after, "{mode:?}");
        }
    }

    #[test]
    fn shallow_only_moves_the_classifier() {
        let mut net = tiny(SnnMode::Shallow, 6);
        let blocks: Vec<Vec<f64>> = net
            .blocks
            .iter()
            .flat_map(Block::params)
            .map(|p| p.value.data().to_vec())
            .collect();
        let cls = net.classifier.w.value.clone();
        let (x, labels) = batch(7, 6);
        net.shallow_step(0, &x, &labels, &ctx(1e-2)).unwrap();
        let after: Vec<Vec<f64>> = net
            .blocks
            .iter()
            .flat_map(Block::params)
            .map(|p| p.value.data().to_vec())
            .collect();
        assert_eq!(blocks, after);
        assert_ne!(cls, net.classifier.w.value);
    }

    #[test]
    fn one_step_voltage_loss_reads_the_preactivation() {
        // with T = 1 the voltage is the block output itself
        let cfg = SnnConfig {
            timesteps: 1,
            channels: vec![],
            fc_hidden: vec![4],
            ..SnnConfig::default()
        };
        let net = SnnNet::<f64>::build(&cfg, &[1, 2, 2], 3).unwrap();
        let mut rng = RngStream::new(8);
        let a = Tensor::from_fn(&[2, 4], |_| rng.uniform(-1.0, 1.0));
        let (v, _) = unroll(&a, 1, 0.5, Reset::Soft, Firing::Spike).unwrap();
        assert_eq!(v, a);
        let t = Tensor::from_fn(&[3, 4], |_| rng.uniform(-1.0, 1.0));
        let (loss, _, dh, _) = net
            .local_loss(&a, &t, &[0, 2], &[0, 1, 2], &ctx(0.0), false)
            .unwrap();
        let direct = pred_loss(
            &a,
            &t,
            &[0, 2],
            &[0, 1, 2],
            Comparator::Dot,
            LogitSign::Similarity,
        )
        .unwrap();
        assert!((loss - direct.loss).abs() < 1e-12);
        assert_eq!(dh, direct.dh);
    }

    #[test]
    fn training_lowers_the_loss() {
        let mut rng = RngStream::new(9);
        let n = 24;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let images = Tensor::from_fn(&[n, 1, 4, 4], |i| {
            let (s, p) = (i / 16, i % 16);
            let base: f32 = if p / 6 == labels[s] { 0.9 } else { 0.1 };
            base + rng.uniform::<f32>(-0.05, 0.05)
        });
        let ds = Dataset::new(images, labels, 3).unwrap();
        for mode in [
            SnnMode::SpSurrogate,
            SnnMode::SpVoltage,
            SnnMode::BpSurrogate,
            SnnMode::Shallow,
        ] {
            let cfg = SnnConfig {
                mode,
                channels: vec![2],
                fc_hidden: vec![8],
                lr: 1e-2,
                epochs: 15,
                batch: 8,
                record_timing: false,
                ..SnnConfig::default()
            };
            let mut net = SnnNet::<f64>::build(&cfg, &[1, 4, 4], 3).unwrap();
            let report = snn_fit(&mut net, &ds, &ds, &cfg, |_| {}).unwrap();
            // the summed local losses for sigprop, the classifier loss otherwise
            let cls: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.layer == "step")
                .filter_map(|r| r.loss)
                .collect();
            assert!(
                cls.last().unwrap() < cls.first().unwrap(),
                "{mode:?}: {cls:?}"
            );
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let bad = SnnConfig {
            timesteps: 0,
            ..SnnConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SnnConfig {
            threshold: Some(-1.0),
            ..SnnConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut net = tiny(SnnMode::SpSurrogate, 0);
        let x = Tensor::<f64>::zeros(&[2, 1, 5, 5]);
        assert!(matches!(net.logits(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mode_thresholds_and_labels() {
        assert_eq!(
            SnnConfig {
                mode: SnnMode::SpVoltage,
                ..SnnConfig::default()
            }
            .threshold(),
            0.5
        );
        assert_eq!(
            SnnConfig {
                mode: SnnMode::Shallow,
                ..SnnConfig::default()
            }
            .threshold(),
            1.0
        );
        let m: SnnMode = serde_json::from_str("\"sp_voltage\"").unwrap();
        assert_eq!(m.label(), "snn_sp_voltage");
    }
}
