use serde::{Deserialize, Serialize};

use super::{one_hot, SparseSpec};
use crate::error::{Error, Result};
use crate::layers::{Dense, Layout, LeakyRelu, Mode, Param, Pass, Stream};
use crate::optim::Adam;
use crate::tensor::{RngStream, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `t1 = f(S1·c + d1)`, one target per class.
    #[default]
    TargetOnly,
    /// `t1 = h1 ⊙ f(S1·c + d1) + f(S2·c + d2)`, one target per sample.
    TargetInput,
    /// `t1 = f(S1·y + S1·y* + d1)` from the network's own prediction.
    TargetLoopPred,
    /// `t1 = f(S1·(h_L − η·e_L) + d1)` from the last layer and its error.
    TargetLoopErr,
}

impl Variant {
    pub fn per_sample(self) -> bool {
        !matches!(self, Variant::TargetOnly)
    }

    pub fn is_loop(self) -> bool {
        matches!(self, Variant::TargetLoopPred | Variant::TargetLoopErr)
    }
}

/// Where the generated target enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// In the output space of the first block; compared with `h1` directly.
    #[default]
    FirstHidden,
    /// In the input space of the first block; forwarded through it.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub placement: Placement,
    pub sparse: SparseSpec,
    /// Negative slope of the output non-linearity; `1.0` is the identity.
    pub slope: f64,
    /// Error mixing factor of [`Variant::TargetLoopErr`].
    pub eta: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TargetOnly,
            placement: Placement::FirstHidden,
            sparse: SparseSpec::Dense,
            slope: 0.01,
            eta: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct InputCache<T: Scalar> {
    h1: Tensor<T>,
    scale: Tensor<T>,
}

/// Maps a learning signal to the first-layer target.
#[derive(Debug, Clone)]
pub struct TargetGenerator<T: Scalar> {
    pub cfg: GeneratorConfig,
    pub classes: usize,
    pub s1: Dense<T>,
    pub s2: Option<Dense<T>>,
    act1: LeakyRelu<T>,
    act2: LeakyRelu<T>,
    /// Per-target shape after zero-extension.
    target_shape: Vec<usize>,
    emit: usize,
    cache: Vec<Option<InputCache<T>>>,
}

impl<T: Scalar> TargetGenerator<T> {
    /// `context_width` is the class count, or the last layer's width for
    /// [`Variant::TargetLoopErr`]. `target_shape` is the full per-target
    /// shape the receiving layer expects (for conv-sparse targets, the
    /// kernel's `[c_in, kh, kw]`).
    pub fn new(
        cfg: GeneratorConfig,
        classes: usize,
        context_width: usize,
        target_shape: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self> {
        let full: usize = target_shape.iter().product();
        let emit = match cfg.sparse {
            SparseSpec::Dense | SparseSpec::Conv => full,
            SparseSpec::Fc { k } => {
                if target_shape.len() != 1 || k == 0 || k > full {
                    return Err(Error::Config(format!(
                        "fc sparse width {k} invalid for target shape {target_shape:?}"
                    )));
                }
                k
            }
        };
        if cfg.variant == Variant::TargetInput
            && (cfg.placement != Placement::FirstHidden || cfg.sparse != SparseSpec::Dense)
        {
            return Err(Error::Config(
                "target_input needs a dense target placed at the first hidden layer".into(),
            ));
        }
        if cfg.sparse == SparseSpec::Conv && cfg.placement != Placement::Input {
            return Err(Error::Config(
                "conv sparse targets are convolved by the first layer; use placement=input".into(),
            ));
        }
        let s1 = Dense::new(context_width, emit, cfg.slope, rng);
        let s2 = (cfg.variant == Variant::TargetInput)
            .then(|| Dense::new(context_width, emit, cfg.slope, rng));
        Ok(Self {
            act1: LeakyRelu::new(cfg.slope),
            act2: LeakyRelu::new(cfg.slope),
            cfg,
            classes,
            s1,
            s2,
            target_shape: target_shape.to_vec(),
            emit,
            cache: Vec::new(),
        })
    }

    /// Layout hint for the first affine op that receives the target.
    pub fn layout(&self) -> Layout {
        match self.cfg.sparse {
            SparseSpec::Dense => Layout::Dense,
            SparseSpec::Fc { k } => Layout::Prefix(k),
            SparseSpec::Conv => Layout::Kernel,
        }
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.target_shape
    }

    fn pass(mode: Mode) -> Pass {
        Pass {
            stream: Stream::Target,
            mode,
            layout: Layout::Dense,
        }
    }

    fn branch(&mut self, ctx: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let z = self.s1.forward(ctx, Self::pass(mode))?;
        self.act1.forward(z, Self::pass(mode))
    }

    fn finish(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        let rows = t.rows();
        let full: usize = self.target_shape.iter().product();
        let t = if self.emit < full {
            crate::layers::zero_extend(&t, full)
        } else {
            t
        };
        let mut shape = vec![rows];
        shape.extend_from_slice(&self.target_shape);
        t.reshape(&shape)
    }

    /// One target per class: `t1 = f(S1·c_m + d1)` with `c` the identity.
    pub fn target_only(&mut self, mode: Mode) -> Result<(Tensor<T>, Vec<usize>)> {
        let classes: Vec<usize> = (0..self.classes).collect();
        let t = self.branch(one_hot(&classes, self.classes), mode)?;
        if mode == Mode::Train {
            self.cache.push(None);
        }
        Ok((self.finish(t)?, classes))
    }

    /// Per-sample scale-and-shift of `h1`.
    pub fn target_input(
        &mut self,
        labels: &[usize],
        h1: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let c = one_hot(labels, self.classes);
        let h1f = h1.clone().flatten2();
        if h1f.rows() != labels.len() || h1f.row_len() != self.emit {
            return Err(Error::dim(
                "target_input",
                h1.shape(),
                &[labels.len(), self.emit],
            ));
        }
        let scale = self.branch(c.clone(), mode)?;
        let s2 = self
            .s2
            .as_mut()
            .ok_or_else(|| Error::Config("target_input generator without S2".into()))?;
        let z = s2.forward(c, Self::pass(mode))?;
        let shift = self.act2.forward(z, Self::pass(mode))?;
        let t = h1f.mul(&scale)?.add(&shift)?;
        if mode == Mode::Train {
            self.cache.push(Some(InputCache { h1: h1f, scale }));
        }
        Ok((self.finish(t)?, labels.to_vec()))
    }

    /// Candidate targets for every class and every sample, sample-major
    /// (`n·m` rows); used for output-target prediction with per-sample
    /// generators.
    pub fn target_input_candidates(&mut self, h1: &Tensor<T>) -> Result<Tensor<T>> {
        let n = h1.shape()[0];
        let m = self.classes;
        let labels: Vec<usize> = (0..n * m).map(|i| i % m).collect();
        let rows: Vec<usize> = (0..n * m).map(|i| i / m).collect();
        let h_rep = h1.clone().flatten2().select_rows(&rows);
        Ok(self.target_input(&labels, &h_rep, Mode::Eval)?.0)
    }

    /// `t1 = f(S1·y + S1·y* + d1)` with one shared `S1`.
    pub fn target_loop_pred(
        &mut self,
        y: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let ctx = y.add(&one_hot(labels, self.classes))?;
        let t = self.branch(ctx, mode)?;
        if mode == Mode::Train {
            self.cache.push(None);
        }
        Ok((self.finish(t)?, labels.to_vec()))
    }

    /// `t1 = f(S1·(h − η·e) + d1)`.
    pub fn target_loop_err(
        &mut self,
        h_out: &Tensor<T>,
        e_out: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let ctx = h_out.sub(&e_out.scale(T::from_f64_lossy(self.cfg.eta)))?;
        let t = self.branch(ctx, mode)?;
        if mode == Mode::Train {
            self.cache.push(None);
        }
        Ok((self.finish(t)?, labels.to_vec()))
    }

    /// Accumulates generator gradients from `∂L/∂t1`. For the target-input
    /// variant also returns the gradient reaching `h1` through `t1`.
    pub fn backward(&mut self, dt: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let cached = self
            .cache
            .pop()
            .ok_or_else(|| Error::Protocol("generator update before forward".into()))?;
        let dt = dt.clone().flatten2();
        let dt = if self.emit < dt.row_len() {
            crate::layers::prefix_columns(&dt, self.emit)
        } else {
            dt
        };
        match cached {
            None => {
                let dz = self.act1.backward(&dt, Stream::Target)?;
                self.s1.backward(&dz, Stream::Target, false)?;
                Ok(None)
            }
            Some(InputCache { h1, scale }) => {
                let dscale = dt.mul(&h1)?;
                let dz = self.act1.backward(&dscale, Stream::Target)?;
                self.s1.backward(&dz, Stream::Target, false)?;
                let dz2 = self.act2.backward(&dt, Stream::Target)?;
                if let Some(s2) = self.s2.as_mut() {
                    s2.backward(&dz2, Stream::Target, false)?;
                }
                Ok(Some(dt.mul(&scale)?))
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.s1.w, &mut self.s1.b];
        if let Some(s2) = self.s2.as_mut() {
            out.push(&mut s2.w);
            out.push(&mut s2.b);
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![
            ("gen.s1.w".to_string(), &self.s1.w),
            ("gen.s1.b".to_string(), &self.s1.b),
        ];
        if let Some(s2) = &self.s2 {
            out.push(("gen.s2.w".to_string(), &s2.w));
            out.push(("gen.s2.b".to_string(), &s2.b));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn step(&mut self, adam: &Adam, lr: f64) {
        for p in self.params_mut() {
            p.step(adam, lr);
        }
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_error, FD_EPS};

    fn gen(
        variant: Variant,
        slope: f64,
        classes: usize,
        ctx: usize,
        width: usize,
    ) -> TargetGenerator<f64> {
        let cfg = GeneratorConfig {
            variant,
            slope,
            ..GeneratorConfig::default()
        };
        TargetGenerator::new(cfg, classes, ctx, &[width], &mut RngStream::new(5)).unwrap()
    }

    #[test]
    fn zero_generator_gives_zero_targets() {
        let mut g = gen(Variant::TargetOnly, 0.01, 3, 3, 4);
        g.s1.w.value.fill(0.0);
        g.s1.b.value.fill(0.0);
        let (t, tc) = g.target_only(Mode::Eval).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(tc, vec![0, 1, 2]);
    }

    #[test]
    fn identity_generator_emits_one_hot() {
        let mut g = gen(Variant::TargetOnly, 1.0, 2, 2, 2);
        g.s1.w.value = Tensor::eye(2);
        g.s1.b.value.fill(0.0);
        let (t, _) = g.target_only(Mode::Eval).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn target_row_is_activated_column_of_s1() {
        let mut g = gen(Variant::TargetOnly, 0.01, 4, 4, 6);
        g.s1.b.value.fill(0.0);
        let (t, _) = g.target_only(Mode::Eval).unwrap();
        for j in 0..4 {
            for k in 0..6 {
                let w = g.s1.w.value.row(j)[k];
                let f = if w >= 0.0 { w } else { 0.01 * w };
                assert_eq!(t.row(j)[k], f);
            }
        }
    }

    #[test]
    fn target_input_identity_and_shift_only() {
        let mut g = gen(Variant::TargetInput, 1.0, 2, 2, 3);
        let h1 = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        g.s1.w.value.fill(0.0);
        g.s1.b.value.fill(1.0);
        let s2 = g.s2.as_mut().unwrap();
        s2.w.value.fill(0.0);
        s2.b.value.fill(0.0);
        let (t, tc) = g.target_input(&[1, 0], &h1, Mode::Eval).unwrap();
        assert_eq!(t, h1);
        assert_eq!(tc, vec![1, 0]);

        g.s1.b.value.fill(0.0);
        let s2 = g.s2.as_mut().unwrap();
        s2.b.value = Tensor::from_f64(&[3], &[0.3, 0.2, 0.1]).unwrap();
        let (t, _) = g.target_input(&[1, 0], &h1, Mode::Eval).unwrap();
        assert_eq!(t.data(), &[0.3, 0.2, 0.1, 0.3, 0.2, 0.1]);
    }

    #[test]
    fn target_input_matches_elementwise_oracle() {
        let mut g = gen(Variant::TargetInput, 0.01, 3, 3, 4);
        let mut rng = RngStream::new(1);
        let h1 = Tensor::<f64>::from_fn(&[2, 4], |_| rng.normal());
        let labels = [2, 0];
        let (t, _) = g.target_input(&labels, &h1, Mode::Eval).unwrap();
        let f = |v: f64| if v >= 0.0 { v } else { 0.01 * v };
        let s2 = g.s2.as_ref().unwrap();
        for (j, &l) in labels.iter().enumerate() {
            for k in 0..4 {
                let a = f(g.s1.w.value.row(l)[k] + g.s1.b.value.data()[k]);
                let b = f(s2.w.value.row(l)[k] + s2.b.value.data()[k]);
                assert!((t.row(j)[k] - (h1.row(j)[k] * a + b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loop_err_without_eta_uses_output_only() {
        let mut g = gen(Variant::TargetLoopErr, 0.01, 2, 3, 4);
        g.cfg.eta = 0.0;
        let mut rng = RngStream::new(2);
        let h = Tensor::<f64>::from_fn(&[2, 3], |_| rng.normal());
        let e = Tensor::<f64>::from_fn(&[2, 3], |_| rng.normal());
        let (t, _) = g.target_loop_err(&h, &e, &[0, 1], Mode::Eval).unwrap();
        let mut direct = g.s1.clone();
        let z = direct.forward(h, Pass::eval(Stream::Target)).unwrap();
        assert_eq!(t, crate::tensor::leaky_relu(&z, 0.01));
    }

    #[test]
    fn loop_pred_with_zero_prediction_is_target_only() {
        let mut g = gen(Variant::TargetLoopPred, 0.01, 3, 3, 5);
        let (t, _) = g
            .target_loop_pred(&Tensor::zeros(&[3, 3]), &[0, 1, 2], Mode::Eval)
            .unwrap();
        let (t0, _) = g.target_only(Mode::Eval).unwrap();
        assert_eq!(t, t0);
    }

    #[test]
    fn loop_pred_shares_s1() {
        let mut g = gen(Variant::TargetLoopPred, 1.0, 2, 2, 3);
        let y = Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap();
        let (t, _) = g.target_loop_pred(&y, &[0], Mode::Eval).unwrap();
        let w = &g.s1.w.value;
        for k in 0..3 {
            let direct =
                0.25 * w.row(0)[k] + 0.75 * w.row(1)[k] + w.row(0)[k] + g.s1.b.value.data()[k];
            assert!((t.data()[k] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_sparse_zero_extends() {
        let cfg = GeneratorConfig {
            sparse: SparseSpec::Fc { k: 2 },
            ..GeneratorConfig::default()
        };
        let mut g = TargetGenerator::<f64>::new(cfg, 3, 3, &[5], &mut RngStream::new(1)).unwrap();
        let (t, _) = g.target_only(Mode::Eval).unwrap();
        assert_eq!(t.shape(), &[3, 5]);
        let mut narrow = g.s1.clone();
        let z = narrow
            .forward(Tensor::eye(3), Pass::eval(Stream::Target))
            .unwrap();
        let z = crate::tensor::leaky_relu(&z, 0.01);
        for j in 0..3 {
            assert_eq!(&t.row(j)[..2], z.row(j));
            assert!(t.row(j)[2..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(g.layout(), Layout::Prefix(2));
    }

    #[test]
    fn fc_sparse_full_width_equals_dense() {
        let dense = GeneratorConfig::default();
        let sparse = GeneratorConfig {
            sparse: SparseSpec::Fc { k: 6 },
            ..GeneratorConfig::default()
        };
        let mut a = TargetGenerator::<f32>::new(dense, 4, 4, &[6], &mut RngStream::new(3)).unwrap();
        let mut b =
            TargetGenerator::<f32>::new(sparse, 4, 4, &[6], &mut RngStream::new(3)).unwrap();
        assert_eq!(
            a.target_only(Mode::Eval).unwrap(),
            b.target_only(Mode::Eval).unwrap()
        );
    }

    #[test]
    fn conv_sparse_target_shapes() {
        // 32x28x28 input into a 32->16 3x3 conv: the dense target would be
        // 32x28x28, the sparse one 32x3x3 per class
        let cfg = GeneratorConfig {
            sparse: SparseSpec::Conv,
            placement: Placement::Input,
            ..GeneratorConfig::default()
        };
        let mut g =
            TargetGenerator::<f32>::new(cfg, 10, 10, &[32, 3, 3], &mut RngStream::new(0)).unwrap();
        let (t, _) = g.target_only(Mode::Eval).unwrap();
        assert_eq!(t.shape(), &[10, 32, 3, 3]);
        let dense = GeneratorConfig {
            placement: Placement::Input,
            ..GeneratorConfig::default()
        };
        let mut g =
            TargetGenerator::<f32>::new(dense, 10, 10, &[32, 28, 28], &mut RngStream::new(0))
                .unwrap();
        assert_eq!(
            g.target_only(Mode::Eval).unwrap().0.shape(),
            &[10, 32, 28, 28]
        );
    }

    #[test]
    fn target_input_gradients_match_finite_differences() {
        let mut rng = RngStream::new(7);
        let g0 = gen(Variant::TargetInput, 0.01, 3, 3, 4);
        let h1 = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let r = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let labels = [0, 2, 2];
        let loss = |g: &TargetGenerator<f64>, h: &Tensor<f64>| {
            let mut g = g.clone();
            g.target_input(&labels, h, Mode::Eval)
                .unwrap()
                .0
                .dot(&r)
                .unwrap()
        };
        let mut g = g0.clone();
        g.target_input(&labels, &h1, Mode::Train).unwrap();
        let dh = g.backward(&r).unwrap().unwrap();
        let nh = numeric_grad(
            |v| loss(&g0, &Tensor::new(&[3, 4], v.to_vec()).unwrap()),
            h1.data(),
            FD_EPS,
        );
        assert!(rel_error(dh.data(), &nh) < 1e-6);
        let nw = numeric_grad(
            |v| {
                let mut p = g0.clone();
                p.s2.as_mut().unwrap().w.value.data_mut().copy_from_slice(v);
                loss(&p, &h1)
            },
            g0.s2.as_ref().unwrap().w.value.data(),
            FD_EPS,
        );
        assert!(rel_error(g.s2.as_ref().unwrap().w.grad.data(), &nw) < 1e-6);
        let nw1 = numeric_grad(
            |v| {
                let mut p = g0.clone();
                p.s1.w.value.data_mut().copy_from_slice(v);
                loss(&p, &h1)
            },
            g0.s1.w.value.data(),
            FD_EPS,
        );
        assert!(rel_error(g.s1.w.grad.data(), &nw1) < 1e-6);
    }
}
