//! Continuous-time recurrent network with a loop from the output back to the
//! first hidden layer, trained with contrastive Hebbian updates.
//!
//! Weights are stored `[pre, post]`, so rates propagate as `ρ(s)·W`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::signal::one_hot;
use crate::tensor::{flush_subnormals, init, s, Init, RngStream, Scalar, Tensor};
use crate::trainer::MetricRow;

/// Hard sigmoid rate function.
pub fn rho<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Derivative of [`rho`]; 1 on the closed interval so that states resting on
/// a clip boundary can still be driven back inside.
pub fn rho_prime<T: Scalar>(v: T) -> T {
    if v >= T::zero() && v <= T::one() {
        T::one()
    } else {
        T::zero()
    }
}

/// Integration constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dynamics {
    /// Clamping factor of the clamped phase.
    pub beta: f64,
    /// Euler step.
    pub eps: f64,
    pub n_free: usize,
    pub n_clamped: usize,
    /// Leak constant `r`.
    pub leak: f64,
    /// Stop a phase early once the largest state change drops below this.
    /// Zero runs every step.
    pub settle_tol: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps: 0.5,
            n_free: 100,
            n_clamped: 20,
            leak: 1.0,
            settle_tol: 1e-4,
        }
    }
}

impl Dynamics {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.leak > 0.0) {
            return Err(Error::Config(format!(
                "leak must be positive, got {}",
                self.leak
            )));
        }
        if self.n_clamped == 0 || self.n_free < self.n_clamped {
            return Err(Error::Config(format!(
                "need n_free >= n_clamped >= 1, got {} and {}",
                self.n_free, self.n_clamped
            )));
        }
        if self.settle_tol < 0.0 {
            return Err(Error::Config("settle_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpConfig {
    pub dataset: String,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub hidden: Vec<usize>,
    pub dynamics: Dynamics,
    /// One rate per weight matrix: input, each forward layer, then the loop.
    pub lr: Vec<f64>,
    pub loop_trainable: bool,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Batches between alignment measurements.
    pub align_every: usize,
    /// Evaluate the test set after every epoch instead of only the last.
    pub eval_each_epoch: bool,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            dataset: "fashion-mnist".into(),
            train_subset: Some(10_000),
            test_subset: None,
            hidden: vec![1500, 1500],
            dynamics: Dynamics::default(),
            lr: vec![0.1, 0.05, 0.01, 0.01],
            loop_trainable: true,
            epochs: 10,
            batch: 20,
            seed: 0,
            align_every: 25,
            eval_each_epoch: false,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if self.lr.len() != self.hidden.len() + 2 {
            return Err(Error::Config(format!(
                "lr needs {} entries (input, {} forward, loop), got {}",
                self.hidden.len() + 2,
                self.hidden.len(),
                self.lr.len()
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.align_every == 0 {
            return Err(Error::Config(
                "epochs, batch and align_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rates of every layer for a batch: hidden layers then the output.
#[derive(Debug, Clone, PartialEq)]
pub struct EpState<T: Scalar> {
    pub s: Vec<Tensor<T>>,
}

impl<T: Scalar> EpState<T> {
    pub fn zeros(batch: usize, widths: &[usize]) -> Self {
        Self {
            s: widths.iter().map(|&w| Tensor::zeros(&[batch, w])).collect(),
        }
    }

    pub fn output(&self) -> &Tensor<T> {
        self.s.last().expect("at least one layer")
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.output().argmax_rows()
    }
}

#[derive(Debug, Clone)]
pub struct EpNet<T: Scalar> {
    /// Input to the first hidden layer.
    pub w_in: Tensor<T>,
    /// `w[k]` feeds layer `k + 1`; the last one feeds the output.
    pub w: Vec<Tensor<T>>,
    /// Output back to the first hidden layer.
    pub w_loop: Tensor<T>,
    /// One bias per layer, hidden then output.
    pub b: Vec<Tensor<T>>,
    pub loop_trainable: bool,
}

fn glorot<T: Scalar>(pre: usize, post: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = (6.0 / (pre + post) as f64).sqrt();
    init(&[pre, post], Init::Uniform(-bound, bound), rng)
}

impl<T: Scalar> EpNet<T> {
    pub fn new(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        loop_trainable: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        let mut widths = hidden.to_vec();
        widths.push(outputs);
        let w_in = glorot(inputs, widths[0], &mut rng.fork(0));
        let w = widths
            .windows(2)
            .enumerate()
            .map(|(k, p)| glorot(p[0], p[1], &mut rng.fork(1 + k as u64)))
            .collect();
        let w_loop = glorot(outputs, widths[0], &mut rng.fork(100));
        let b = widths.iter().map(|&n| Tensor::zeros(&[n])).collect();
        Ok(Self {
            w_in,
            w,
            w_loop,
            b,
            loop_trainable,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.b.iter().map(|b| b.len()).collect()
    }

    pub fn inputs(&self) -> usize {
        self.w_in.shape()[0]
    }

    /// `x·W_in`, constant while the input is held fixed.
    pub fn input_drive(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.map(rho).matmul(&self.w_in)
    }

    /// One explicit Euler step of every layer from the current state, then a
    /// projection of the rates onto `[0, 1]`. `d` nudges the output when
    /// `beta > 0`. Returns the largest state change.
    pub fn dynamics_step(
        &self,
        state: &mut EpState<T>,
        input_drive: &Tensor<T>,
        beta: f64,
        d: Option<&Tensor<T>>,
        dynamics: &Dynamics,
    ) -> Result<f64> {
        let layers = state.s.len();
        if layers != self.b.len() {
            return Err(Error::dim("dynamics_step", &[layers], &[self.b.len()]));
        }
        let rates: Vec<Tensor<T>> = state.s.iter().map(|s| s.map(rho)).collect();
        let mut drives = Vec::with_capacity(layers);
        let mut first = rates[layers - 1].matmul(&self.w_loop)?;
        first.add_assign(input_drive)?;
        drives.push(first);
        for k in 1..layers {
            drives.push(rates[k - 1].matmul(&self.w[k - 1])?);
        }
        let eps: T = s(dynamics.eps);
        let inv_r: T = s(1.0 / dynamics.leak);
        let beta_t: T = s(beta);
        let mut change = 0.0f64;
        for (k, (st, drive)) in state.s.iter_mut().zip(&drives).enumerate() {
            let width = st.row_len();
            let bias = self.b[k].data();
            let nudge = if k == layers - 1 && beta != 0.0 {
                let d = d.ok_or_else(|| Error::Argument("clamped step without a target".into()))?;
                if d.shape() != st.shape() {
                    return Err(Error::dim("dynamics_step target", d.shape(), st.shape()));
                }
                Some(d.data())
            } else {
                None
            };
            for (i, (v, &dr)) in st.data_mut().iter_mut().zip(drive.data()).enumerate() {
                let mut ds = rho_prime(*v) * (dr + bias[i % width]) - *v * inv_r;
                if let Some(d) = nudge {
                    ds -= beta_t * (*v - d[i]);
                }
                let next = *v + eps * ds;
                if !next.is_finite() {
                    return Err(Error::Divergence { eps: dynamics.eps });
                }
                let next = rho(next);
                change = change.max((next - *v).abs().to_f64_lossy());
                *v = next;
            }
        }
        Ok(change)
    }

    fn relax(
        &self,
        state: &mut EpState<T>,
        input_drive: &Tensor<T>,
        beta: f64,
        d: Option<&Tensor<T>>,
        steps: usize,
        dynamics: &Dynamics,
    ) -> Result<usize> {
        for step in 0..steps {
            let change = self.dynamics_step(state, input_drive, beta, d, dynamics)?;
            if change < dynamics.settle_tol {
                return Ok(step + 1);
            }
        }
        Ok(steps)
    }

    /// Relaxes with no target for `n_free` steps. Returns the steps taken.
    pub fn free_phase(
        &self,
        state: &mut EpState<T>,
        input_drive: &Tensor<T>,
        dynamics: &Dynamics,
    ) -> Result<usize> {
        self.relax(state, input_drive, 0.0, None, dynamics.n_free, dynamics)
    }

    /// Nudges the output toward `d` for `n_clamped` steps from `state`.
    pub fn clamped_phase(
        &self,
        state: &mut EpState<T>,
        input_drive: &Tensor<T>,
        d: &Tensor<T>,
        beta: f64,
        dynamics: &Dynamics,
    ) -> Result<usize> {
        self.relax(
            state,
            input_drive,
            beta,
            Some(d),
            dynamics.n_clamped,
            dynamics,
        )
    }

    /// Contrastive Hebbian update from the free (`s0`) and clamped (`sb`)
    /// fixed points, averaged over the batch. `lr` follows the order of
    /// [`EpConfig::lr`]; the loop entry is ignored for a fixed loop.
    pub fn chl_update(
        &mut self,
        x: &Tensor<T>,
        s0: &EpState<T>,
        sb: &EpState<T>,
        beta: f64,
        lr: &[f64],
    ) -> Result<()> {
        let layers = self.b.len();
        if lr.len() != layers + 1 || s0.s.len() != layers || sb.s.len() != layers {
            return Err(Error::Argument(format!(
                "chl_update expects {} rates and {} layers",
                layers + 1,
                layers
            )));
        }
        let n = x.rows().max(1) as f64;
        let pre0: Vec<Tensor<T>> = s0.s.iter().map(|v| v.map(rho)).collect();
        let dpost: Vec<Tensor<T>> =
            sb.s.iter()
                .zip(&s0.s)
                .map(|(b, f)| b.map(rho).sub(&f.map(rho)))
                .collect::<Result<_>>()?;
        let scale = |k: usize| -> T { s(lr[k] / (beta * n)) };

        self.w_in.axpy(scale(0), &x.map(rho).t_matmul(&dpost[0])?)?;
        for k in 0..layers - 1 {
            let dw = pre0[k].t_matmul(&dpost[k + 1])?;
            self.w[k].axpy(scale(k + 1), &dw)?;
        }
        if self.loop_trainable {
            let dw = pre0[layers - 1].t_matmul(&dpost[0])?;
            self.w_loop.axpy(scale(layers), &dw)?;
        }
        // biases take the update of their post-synaptic layer
        for (k, bias) in self.b.iter_mut().enumerate() {
            bias.axpy(scale(k), &dpost[k].sum_rows())?;
        }
        Ok(())
    }

    /// The weights around the loop, in signal order: forward layers, then
    /// the loop back.
    pub fn checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint<T> {
        let mut tensors = vec![("w_in".to_string(), self.w_in.clone())];
        tensors.extend(
            self.w
                .iter()
                .enumerate()
                .map(|(k, w)| (format!("w{}", k + 1), w.clone())),
        );
        tensors.push(("w_loop".into(), self.w_loop.clone()));
        tensors.extend(
            self.b
                .iter()
                .enumerate()
                .map(|(k, b)| (format!("b{k}"), b.clone())),
        );
        Checkpoint {
            seed,
            epoch,
            tensors,
        }
    }

    pub fn loop_weights(&self) -> Vec<&Tensor<T>> {
        self.w.iter().chain(std::iter::once(&self.w_loop)).collect()
    }

    /// For each loop weight `W_z`, the angle between the product of the other
    /// loop weights (taken in signal order after `z`) and `W_zᵀ`.
    pub fn alignment(&self) -> Result<Vec<(String, f64)>> {
        let ws = self.loop_weights();
        let n = ws.len();
        let mut out = Vec::with_capacity(n);
        for z in 0..n {
            let order: Vec<usize> = (1..n).map(|j| (z + j) % n).collect();
            let mut prod = ws[order[0]].clone();
            for &j in &order[1..] {
                prod = prod.matmul(ws[j])?;
            }
            let name: String = order
                .iter()
                .map(|j| format!("W{}", j + 1))
                .collect::<String>()
                + &format!("-W{}", z + 1);
            out.push((name, alignment_angle(&prod, &ws[z].transpose2()?)?));
        }
        Ok(out)
    }

    /// One training step on a batch: free phase, clamped phase and update.
    /// Returns the free-phase state.
    pub fn train_batch(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        cfg: &EpConfig,
    ) -> Result<EpState<T>> {
        let dynamics = &cfg.dynamics;
        let drive = self.input_drive(x)?;
        let widths = self.widths();
        let mut s0 = EpState::zeros(x.rows(), &widths);
        self.free_phase(&mut s0, &drive, dynamics)?;
        let d = one_hot::<T>(labels, *widths.last().expect("output layer"));
        let mut sb = s0.clone();
        self.clamped_phase(&mut sb, &drive, &d, dynamics.beta, dynamics)?;
        self.chl_update(x, &s0, &sb, dynamics.beta, &cfg.lr)?;
        Ok(s0)
    }

    /// Free-phase predictions for a dataset.
    pub fn evaluate(&self, ds: &Dataset, batch: usize, dynamics: &Dynamics) -> Result<f64> {
        let mut wrong = 0usize;
        for idx in ds.batches_in_order(batch) {
            let (x, labels) = ds.batch::<T>(&idx);
            let x = x.flatten2();
            let drive = self.input_drive(&x)?;
            let mut st = EpState::zeros(x.rows(), &self.widths());
            self.free_phase(&mut st, &drive, dynamics)?;
            wrong += st
                .predictions()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p != l)
                .count();
        }
        Ok(if ds.is_empty() {
            0.0
        } else {
            wrong as f64 / ds.len() as f64
        })
    }
}

/// Angle in degrees between two equally shaped matrices viewed as vectors.
pub fn alignment_angle<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("alignment_angle", a.shape(), b.shape()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    Ok((dot / (na.sqrt() * nb.sqrt()))
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees())
}

/// One line of the alignment CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub epoch: usize,
    pub pair: String,
    pub mean_angle_deg: f64,
    pub std: f64,
}

pub fn write_alignment_csv<W: std::io::Write>(out: W, rows: &[AlignmentRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn summarize(epoch: usize, samples: &[Vec<(String, f64)>]) -> Vec<AlignmentRow> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|p| {
            let vals: Vec<f64> = samples.iter().map(|s| s[p].1).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            AlignmentRow {
                epoch,
                pair: first[p].0.clone(),
                mean_angle_deg: mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EpReport {
    /// One `step` row per epoch, mode `ep`.
    pub rows: Vec<MetricRow>,
    /// Epoch 0 holds the angles at initialization.
    pub alignment: Vec<AlignmentRow>,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_s: f64,
}

impl EpReport {
    /// Mean angle of `pair` in `epoch`.
    pub fn angle(&self, epoch: usize, pair: &str) -> Option<f64> {
        self.alignment
            .iter()
            .find(|r| r.epoch == epoch && r.pair == pair)
            .map(|r| r.mean_angle_deg)
    }

    pub fn pairs(&self) -> Vec<String> {
        self.alignment
            .iter()
            .filter(|r| r.epoch == 0)
            .map(|r| r.pair.clone())
            .collect()
    }
}

/// Trains `net`, recording the loop alignment as it goes.
pub fn ep_fit<T: Scalar>(
    net: &mut EpNet<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &EpConfig,
    mut on_epoch: impl FnMut(&MetricRow, &[AlignmentRow]),
) -> Result<EpReport> {
    cfg.validate()?;
    flush_subnormals();
    let per_image: usize = train.image_shape().iter().product();
    if per_image != net.inputs() {
        return Err(Error::Config(format!(
            "images of {per_image} pixels do not fit {} inputs",
            net.inputs()
        )));
    }
    let started = Instant::now();
    let root = RngStream::new(cfg.seed);
    let mut rows = Vec::new();
    let mut alignment = summarize(0, &[net.alignment()?]);
    let mut test_err = 0.0;
    let mut train_err = 0.0;
    for epoch in 1..=cfg.epochs {
        let shuffle = root.fork(1000 + epoch as u64).next_u64();
        let mut samples = Vec::new();
        let (mut wrong, mut seen, mut loss) = (0usize, 0usize, 0.0f64);
        for (i, idx) in train.batches(cfg.batch, shuffle).enumerate() {
            let (x, labels) = train.batch::<T>(&idx);
            let x = x.flatten2();
            let s0 = net.train_batch(&x, &labels, cfg)?;
            let out = s0.output();
            let m = out.row_len();
            for (r, &l) in labels.iter().enumerate() {
                loss += out
                    .row(r)
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let t = if j == l { 1.0 } else { 0.0 };
                        0.5 * (v.to_f64_lossy() - t).powi(2)
                    })
                    .sum::<f64>();
                debug_assert!(l < m);
            }
            wrong += s0
                .predictions()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p != l)
                .count();
            seen += labels.len();
            if (i + 1) % cfg.align_every == 0 {
                samples.push(net.alignment()?);
            }
        }
        if samples.is_empty() {
            samples.push(net.alignment()?);
        }
        train_err = wrong as f64 / seen.max(1) as f64;
        let evaluated = cfg.eval_each_epoch || epoch == cfg.epochs;
        if evaluated {
            test_err = net.evaluate(test, 500, &cfg.dynamics)?;
        }
        let row = MetricRow {
            mode: "ep".into(),
            epoch,
            layer: "step".into(),
            loss: Some(loss / seen.max(1) as f64),
            time_per_sample_s: None,
            peak_bytes: 0,
            train_err: Some(train_err),
            test_err: evaluated.then_some(test_err),
        };
        let angles = summarize(epoch, &samples);
        on_epoch(&row, &angles);
        rows.push(row);
        alignment.extend(angles);
    }
    Ok(EpReport {
        rows,
        alignment,
        train_err,
        test_err,
        wall_s: started.elapsed().as_secs_f64(),
    })
}
