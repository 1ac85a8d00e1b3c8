//! Central finite-difference checks for every analytic gradient in the crate.
//!
//! Errors are reported as `‖a − n‖ / max(‖a‖, ‖n‖)` over the whole gradient
//! vector of one parameter (or input), which stays meaningful when
//! individual entries are near zero. Gradients whose norms are both below
//! [`ZERO_FLOOR`] count as exactly zero (e.g. a conv bias feeding batchnorm),
//! where the finite difference is pure rounding noise.

use serde::Serialize;

use crate::baselines::{bp_backward, bp_loss};
use crate::error::Result;
use crate::layers::{
    BatchNorm, Block, Conv2d, Dense, Dropout, Flatten, LeakyRelu, MaxPool, Op, Param, Pass, Stream,
};
use crate::signal::{pred_loss, Comparator, LogitSign};
use crate::snn::{Firing, Reset, SnnConfig, SnnMode, SnnNet};
use crate::tensor::{RngStream, Tensor};
use crate::trainer::{Arch, Network, TrainConfig};

pub const FD_EPS: f64 = 1e-5;
pub const ZERO_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub suite: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < ZERO_FLOOR {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Checks a block against `L = Σ r ⊙ block(x)` for a random direction `r`.
///
/// Every parameter gradient and the input gradient are compared; the worst
/// relative error is returned. The block is probed in training mode on
/// clones so stochastic ops replay the same draws.
pub fn check_block(
    block: &Block<f64>,
    x: &Tensor<f64>,
    pass: Pass,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut probe = block.clone();
    let y = probe.forward(x.clone(), pass)?;
    let r = Tensor::from_fn(y.shape(), |_| rng.normal::<f64>());
    let loss = |b: &Block<f64>, x: &Tensor<f64>| -> f64 {
        let mut b = b.clone();
        let y = b
            .forward(x.clone(), pass)
            .expect("shapes fixed by the first call");
        y.dot(&r).expect("same shape")
    };

    let mut analytic = block.clone();
    analytic.zero_grad();
    analytic.forward(x.clone(), pass)?;
    let dx = analytic
        .backward(&r, pass.stream, true)?
        .expect("input gradient requested");

    let mut worst = rel_error(
        dx.data(),
        &numeric_grad(
            |v| loss(block, &Tensor::new(x.shape(), v.to_vec()).unwrap()),
            x.data(),
            FD_EPS,
        ),
    );
    let grads: Vec<Vec<f64>> = analytic
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    for (pi, g) in grads.iter().enumerate() {
        let base = block.params()[pi].value.data().to_vec();
        let num = numeric_grad(
            |v| {
                let mut b = block.clone();
                b.params_mut()[pi].value.data_mut().copy_from_slice(v);
                loss(&b, x)
            },
            &base,
            FD_EPS,
        );
        worst = worst.max(rel_error(g, &num));
    }
    Ok(worst)
}

fn random_input(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal::<f64>())
}

fn perturb_bn(bn: &mut BatchNorm<f64>, rng: &mut RngStream) {
    for v in bn.gamma.value.data_mut() {
        *v = 0.5 + rng.uniform::<f64>(0.0, 1.0);
    }
    for v in bn.beta.value.data_mut() {
        *v = rng.normal();
    }
    for v in bn.running_mean.data_mut() {
        *v = 0.3 * rng.normal::<f64>();
    }
    for v in bn.running_var.data_mut() {
        *v = rng.uniform(0.5, 2.0);
    }
}

/// Finite-difference suites for every layer type over `instances` random
/// configurations each.
pub fn layer_suites(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    type Case = fn(&mut RngStream) -> (Block<f64>, Tensor<f64>, Pass);
    let cases: Vec<(&str, Case)> = vec![
        ("dense", |rng| {
            let (n, i, o) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(5));
            let b = Block::new(vec![Op::Dense(Dense::new(i, o, 0.01, rng))]);
            (b, random_input(&[n, i], rng), Pass::train(Stream::Input))
        }),
        ("dense_prefix", |rng| {
            let (n, i, o) = (1 + rng.below(3), 2 + rng.below(5), 1 + rng.below(4));
            let k = 1 + rng.below(i - 1);
            let b = Block::new(vec![Op::Dense(Dense::new(i, o, 0.01, rng))]);
            let mut x = random_input(&[n, i], rng);
            for r in 0..n {
                x.row_mut(r)[k..].iter_mut().for_each(|v| *v = 0.0);
            }
            let pass = Pass::train(Stream::Target).with_layout(crate::layers::Layout::Prefix(k));
            (b, x, pass)
        }),
        ("conv", |rng| {
            let (n, ci, co) = (1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(3));
            let (stride, pad) = (1 + rng.below(2), rng.below(2));
            let side = 4 + rng.below(2);
            let b = Block::new(vec![Op::Conv(Conv2d::new(
                ci, co, 3, stride, pad, 0.01, rng,
            ))]);
            (
                b,
                random_input(&[n, ci, side, side], rng),
                Pass::train(Stream::Input),
            )
        }),
        ("conv_kernel_target", |rng| {
            let (m, ci, co) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
            let b = Block::new(vec![Op::Conv(Conv2d::new(ci, co, 3, 1, 1, 0.01, rng))]);
            let pass = Pass::train(Stream::Target).with_layout(crate::layers::Layout::Kernel);
            (b, random_input(&[m, ci, 3, 3], rng), pass)
        }),
        ("batchnorm_input", |rng| {
            let (n, c) = (2 + rng.below(5), 1 + rng.below(4));
            let mut bn = BatchNorm::new(c);
            perturb_bn(&mut bn, rng);
            let shape: Vec<usize> = if rng.bernoulli(0.5) {
                vec![n, c]
            } else {
                vec![n, c, 2, 3]
            };
            (
                Block::new(vec![Op::BatchNorm(bn)]),
                random_input(&shape, rng),
                Pass::train(Stream::Input),
            )
        }),
        ("batchnorm_target", |rng| {
            let (m, c) = (1 + rng.below(4), 1 + rng.below(4));
            let mut bn = BatchNorm::new(c);
            perturb_bn(&mut bn, rng);
            (
                Block::new(vec![Op::BatchNorm(bn)]),
                random_input(&[m, c], rng),
                Pass::train(Stream::Target),
            )
        }),
        ("leaky_relu", |rng| {
            let shape = [1 + rng.below(4), 1 + rng.below(6)];
            let b = Block::new(vec![Op::LeakyRelu(LeakyRelu::new(0.01))]);
            (b, random_input(&shape, rng), Pass::train(Stream::Input))
        }),
        ("dropout", |rng| {
            let shape = [1 + rng.below(4), 1 + rng.below(6)];
            let d = Dropout::new(0.3, rng.fork(7)).expect("valid rate");
            (
                Block::new(vec![Op::Dropout(d)]),
                random_input(&shape, rng),
                Pass::train(Stream::Input),
            )
        }),
        ("maxpool", |rng| {
            let side = 2 + rng.below(4);
            let shape = [1 + rng.below(2), 1 + rng.below(3), side, side];
            let b = Block::new(vec![Op::MaxPool(MaxPool::new(2).expect("k > 0"))]);
            (b, random_input(&shape, rng), Pass::train(Stream::Input))
        }),
        ("flatten_dense", |rng| {
            let (n, c) = (1 + rng.below(3), 1 + rng.below(3));
            let b = Block::new(vec![
                Op::Flatten(Flatten::new()),
                Op::Dense(Dense::new(c * 4, 3, 0.01, rng)),
            ]);
            (
                b,
                random_input(&[n, c, 2, 2], rng),
                Pass::train(Stream::Input),
            )
        }),
        ("conv_bn_act_pool", |rng| {
            let (n, ci, co) = (2 + rng.below(2), 1 + rng.below(2), 1 + rng.below(3));
            let mut bn = BatchNorm::new(co);
            perturb_bn(&mut bn, rng);
            let b = Block::new(vec![
                Op::Conv(Conv2d::new(ci, co, 3, 1, 1, 0.01, rng)),
                Op::BatchNorm(bn),
                Op::LeakyRelu(LeakyRelu::new(0.01)),
                Op::MaxPool(MaxPool::new(2).expect("k > 0")),
            ]);
            (
                b,
                random_input(&[n, ci, 4, 4], rng),
                Pass::train(Stream::Input),
            )
        }),
    ];
    let root = RngStream::new(seed);
    let mut reports = Vec::new();
    for (ci, (name, case)) in cases.into_iter().enumerate() {
        let mut rng = root.fork(ci as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (block, x, pass) = case(&mut rng);
            worst = worst.max(check_block(&block, &x, pass, &mut rng)?);
        }
        reports.push(GradReport {
            suite: name.to_string(),
            instances,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

fn params_of<'a>(blocks: &'a [Block<f64>], extra: &'a [&'a Param<f64>]) -> Vec<&'a Param<f64>> {
    blocks
        .iter()
        .flat_map(Block::params)
        .chain(extra.iter().copied())
        .collect()
}

/// Finite-difference suites for the losses and the end-to-end gradients:
/// the local prediction loss under each comparator, backpropagation through
/// a whole network, and the unrolled spiking network with its spike
/// replaced by the surrogate.
pub fn loss_suites(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    let root = RngStream::new(seed);
    let mut reports = Vec::new();
    let mut report = |suite: &str, worst: f64| {
        reports.push(GradReport {
            suite: suite.to_string(),
            instances,
            max_rel_err: worst,
        })
    };

    for (ci, (name, cmp, sign)) in [
        ("pred_loss_dot", Comparator::Dot, LogitSign::Similarity),
        ("pred_loss_dot_negated", Comparator::Dot, LogitSign::Negated),
        ("pred_loss_l2", Comparator::L2, LogitSign::Similarity),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = root.fork(ci as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (n, d, m) = (1 + rng.below(5), 1 + rng.below(6), 2 + rng.below(3));
            // targets may repeat a class; every label must have a target
            let rows = m + rng.below(3);
            let target_class: Vec<usize> = (0..rows)
                .map(|r| if r < m { r } else { rng.below(m) })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(m)).collect();
            let h = random_input(&[n, d], &mut rng);
            let t = random_input(&[rows, d], &mut rng).scale(0.5);
            let out = pred_loss(&h, &t, &labels, &target_class, cmp, sign)?;
            let f = |h: &Tensor<f64>, t: &Tensor<f64>| {
                pred_loss(h, t, &labels, &target_class, cmp, sign)
                    .expect("shapes fixed")
                    .loss
            };
            let nh = numeric_grad(
                |v| f(&Tensor::new(h.shape(), v.to_vec()).unwrap(), &t),
                h.data(),
                FD_EPS,
            );
            let nt = numeric_grad(
                |v| f(&h, &Tensor::new(t.shape(), v.to_vec()).unwrap()),
                t.data(),
                FD_EPS,
            );
            worst = worst
                .max(rel_error(out.dh.data(), &nh))
                .max(rel_error(out.dt.data(), &nt));
        }
        report(name, worst);
    }

    let mut rng = root.fork(10);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let cfg = TrainConfig {
            arch: Arch::Fc {
                hidden: vec![2 + rng.below(4), 2 + rng.below(4)],
                batchnorm: i % 2 == 1,
                dropout: 0.0,
            },
            seed: rng.next_u64(),
            ..TrainConfig::default()
        };
        let classes = 2 + rng.below(3);
        let net = Network::<f64>::build(&cfg, &[1, 2, 2], classes)?;
        let n = 2 + rng.below(4);
        let x = random_input(&[n, 4], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let mut g = net.clone();
        bp_backward(&mut g, &x, &labels)?;
        let cls = |net: &Network<f64>| -> Vec<Param<f64>> {
            net.classifier
                .iter()
                .flat_map(|c| [c.w.clone(), c.b.clone()])
                .collect()
        };
        let g_cls = cls(&g);
        let g_extra: Vec<&Param<f64>> = g_cls.iter().collect();
        let analytic: Vec<Vec<f64>> = params_of(&g.blocks, &g_extra)
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect();
        for (pi, a) in analytic.iter().enumerate() {
            let base_cls = cls(&net);
            let base_extra: Vec<&Param<f64>> = base_cls.iter().collect();
            let base = params_of(&net.blocks, &base_extra)[pi]
                .value
                .data()
                .to_vec();
            let num = numeric_grad(
                |v| {
                    let mut p = net.clone();
                    {
                        let mut all: Vec<&mut Param<f64>> =
                            p.blocks.iter_mut().flat_map(Block::params_mut).collect();
                        if let Some(c) = p.classifier.as_mut() {
                            all.push(&mut c.w);
                            all.push(&mut c.b);
                        }
                        all[pi].value.data_mut().copy_from_slice(v);
                    }
                    bp_loss(&p, &x, &labels).expect("shapes fixed")
                },
                &base,
                FD_EPS,
            );
            worst = worst.max(rel_error(a, &num));
        }
    }
    report("bp_end_to_end", worst);

    let mut rng = root.fork(11);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let cfg = SnnConfig {
            mode: SnnMode::BpSurrogate,
            timesteps: 1 + rng.below(3),
            threshold: Some(rng.uniform(0.3, 1.0)),
            reset: if i % 2 == 0 { Reset::Soft } else { Reset::Hard },
            channels: vec![1 + rng.below(2)],
            fc_hidden: vec![2 + rng.below(2)],
            seed: rng.next_u64(),
            ..SnnConfig::default()
        };
        let classes = 2 + rng.below(2);
        let net = SnnNet::<f64>::build(&cfg, &[1, 4, 4], classes)?;
        let n = 2 + rng.below(2);
        let x = Tensor::from_fn(&[n, 1, 4, 4], |_| rng.uniform::<f64>(0.0, 1.5));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let mut g = net.clone();
        g.zero_grad();
        g.bp_backward(&x, &labels, Firing::Smooth)?;
        let extra = [&g.classifier.w, &g.classifier.b];
        let analytic: Vec<Vec<f64>> = params_of(&g.blocks, &extra)
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect();
        for (pi, a) in analytic.iter().enumerate() {
            let base_extra = [&net.classifier.w, &net.classifier.b];
            let base = params_of(&net.blocks, &base_extra)[pi]
                .value
                .data()
                .to_vec();
            let num = numeric_grad(
                |v| {
                    let mut p = net.clone();
                    {
                        let mut all: Vec<&mut Param<f64>> =
                            p.blocks.iter_mut().flat_map(Block::params_mut).collect();
                        all.push(&mut p.classifier.w);
                        all.push(&mut p.classifier.b);
                        all[pi].value.data_mut().copy_from_slice(v);
                    }
                    p.smooth_loss(&x, &labels).expect("shapes fixed")
                },
                &base,
                FD_EPS,
            );
            worst = worst.max(rel_error(a, &num));
        }
    }
    report("snn_unroll", worst);
    Ok(reports)
}
