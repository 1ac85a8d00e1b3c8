use serde::Serialize;

use super::network::{LoopContext, Network};
use super::PredictMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Layout, Mode, Pass, Stream};
use crate::signal::{
    predict_output_target, predict_per_sample, Comparator, LogitSign, Placement, Variant,
};
use crate::tensor::{Scalar, Tensor};

/// Test errors of one network on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// The dataset was empty; every error is reported as 0.
    pub empty: bool,
    pub classifier_err: Option<f64>,
    /// Output-target error at every block (early exits). The last entry is
    /// the network's output-target prediction.
    pub layer_err: Vec<f64>,
}

impl EvalReport {
    pub fn error(&self, mode: PredictMode) -> Result<f64> {
        match mode {
            PredictMode::Classifier => self.classifier_err.ok_or_else(|| {
                Error::Config("classifier prediction without a classifier layer".into())
            }),
            PredictMode::OutputTarget => self
                .layer_err
                .last()
                .copied()
                .ok_or_else(|| Error::Config("output-target errors were not computed".into())),
        }
    }
}

/// Targets for the first block in evaluation mode. Per-sample generators
/// produce one candidate per (sample, class), sample-major.
fn eval_targets<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    h1: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>, bool)> {
    let n = x.shape()[0];
    let m = net.classes;
    let cand: Vec<usize> = (0..n * m).map(|i| i % m).collect();
    let rep: Vec<usize> = (0..n * m).map(|i| i / m).collect();
    let variant = net.generator.cfg.variant;
    let ctx = if variant.is_loop() {
        let h_last = net.forward_eval(x.clone())?.flatten2();
        Some(net.loop_context_from(&h_last.select_rows(&rep), &cand)?)
    } else {
        None
    };
    let gen = &mut net.generator;
    let out = match (variant, ctx) {
        (Variant::TargetOnly, _) => {
            let (t, tc) = gen.target_only(Mode::Eval)?;
            (t, tc, false)
        }
        (Variant::TargetInput, _) => (gen.target_input_candidates(h1)?, cand, true),
        (Variant::TargetLoopPred, Some(LoopContext::Pred(y))) => {
            (gen.target_loop_pred(&y, &cand, Mode::Eval)?.0, cand, true)
        }
        (Variant::TargetLoopErr, Some(LoopContext::Err { h, e })) => (
            gen.target_loop_err(&h, &e, &cand, Mode::Eval)?.0,
            cand,
            true,
        ),
        (v, _) => return Err(Error::Protocol(format!("no evaluation targets for {v:?}"))),
    };
    Ok(out)
}

/// Classifier error and, with `exits`, output-target errors at every block.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    ds: &Dataset,
    batch: usize,
    cmp: Comparator,
    sign: LogitSign,
    exits: bool,
) -> Result<EvalReport> {
    let depth = net.blocks.len();
    let mut wrong_exit = vec![0usize; if exits { depth } else { 0 }];
    let mut wrong_cls = 0usize;
    let all_classes: Vec<usize> = (0..net.classes).collect();
    for idx in ds.batches_in_order(batch) {
        let (x, labels) = ds.batch::<T>(&idx);
        let x = net.prepare_input(x)?;
        let mut h = x.clone();
        let mut t: Option<Tensor<T>> = None;
        let mut tc = Vec::new();
        let mut per_sample = false;
        let mut layout = Layout::Dense;
        for i in 0..depth {
            h = net.blocks[i].forward(h, Pass::eval(Stream::Input))?;
            if !exits {
                continue;
            }
            let ti = if i == 0 {
                let (t0, c, ps) = eval_targets(net, &x, &h)?;
                tc = c;
                per_sample = ps;
                let gl = net.generator.layout();
                match net.generator.cfg.placement {
                    Placement::FirstHidden => {
                        layout = gl;
                        t0
                    }
                    Placement::Input => {
                        net.blocks[0].forward(t0, Pass::eval(Stream::Target).with_layout(gl))?
                    }
                }
            } else {
                let prev = t.take().expect("set at block 0");
                let out =
                    net.blocks[i].forward(prev, Pass::eval(Stream::Target).with_layout(layout))?;
                layout = Layout::Dense;
                out
            };
            let pred = if per_sample {
                predict_per_sample(&h, &ti, &all_classes, cmp, sign)?
            } else {
                predict_output_target(&h, &ti, &tc, cmp, sign)?
            };
            wrong_exit[i] += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
            t = Some(ti);
        }
        if net.classifier.is_some() {
            let pred = net.logits(&h)?.argmax_rows();
            wrong_cls += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
        }
    }
    let n = ds.len();
    let rate = |w: usize| if n == 0 { 0.0 } else { w as f64 / n as f64 };
    Ok(EvalReport {
        samples: n,
        empty: n == 0,
        classifier_err: net.classifier.is_some().then(|| rate(wrong_cls)),
        layer_err: wrong_exit.into_iter().map(rate).collect(),
    })
}
