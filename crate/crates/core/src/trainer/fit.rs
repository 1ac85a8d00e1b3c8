use std::time::Instant;

use super::eval::{evaluate, EvalReport};
use super::metrics::{EpochStats, MetricRow};
use super::network::Network;
use super::pipeline::{epoch_pipeline, epoch_sequential, Batch};
use super::stage::StepContext;
use super::{Method, TrainConfig};
use crate::baselines::{bp_step, shallow_step, FeedbackWeights};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{flush_subnormals, RngStream, Scalar};

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub eval: EvalReport,
    /// Error in the configured prediction mode.
    pub test_err: f64,
    pub train_err: Option<f64>,
    pub wall_s: f64,
}

fn batches_for<'a, T: Scalar>(
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    input_shape: &'a [usize],
    epoch: usize,
) -> impl Iterator<Item = Batch<T>> + 'a {
    let root = RngStream::new(cfg.seed);
    let shuffle = root.fork(1000 + epoch as u64).next_u64();
    let side = ds.image_shape()[1];
    let aug = AugmentConfig::default_for(side, false, 0);
    let mut aug_rng = root.fork(2000 + epoch as u64);
    ds.batches(cfg.batch, shuffle).map(move |idx| {
        let (mut x, labels) = ds.batch::<T>(&idx);
        if cfg.augment {
            x = augment(&x, &aug, &mut aug_rng);
        }
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(input_shape);
        Batch {
            x: x.reshape(&shape)
                .expect("image size checked against the network"),
            labels,
        }
    })
}

/// Trains `net` for `cfg.epochs` epochs, evaluating on `test` after every
/// epoch. `on_epoch` receives each epoch's metrics rows as they are made.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[MetricRow]),
) -> Result<TrainReport> {
    cfg.validate()?;
    flush_subnormals();
    let per_image: usize = train.image_shape().iter().product();
    if per_image != net.input_shape.iter().product::<usize>() {
        return Err(Error::Config(format!(
            "images of shape {:?} do not fit the network input {:?}",
            train.image_shape(),
            net.input_shape
        )));
    }
    if cfg.method == Method::Fa
        && net.blocks.iter().flat_map(|b| &b.ops).all(|op| match op {
            crate::layers::Op::Dense(d) => d.feedback.is_none(),
            _ => true,
        })
    {
        let mut rng = RngStream::new(cfg.seed).fork(300);
        FeedbackWeights::random(net, &mut rng).install(net)?;
    }
    let schedule = cfg.schedule();
    let exits = cfg.early_exits && cfg.method == Method::Sigprop;
    let mode = cfg.mode_label().to_string();
    let input_shape = net.input_shape.clone();
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut last_eval = None;
    let mut last_train_err = None;

    for epoch in 0..cfg.epochs {
        let ctx = StepContext {
            lr: schedule.lr_at(epoch, cfg.epochs),
            adam: cfg.adam,
            cmp: cfg.comparator,
            sign: cfg.logit_sign,
            timing: cfg.record_timing,
        };
        let batches = batches_for::<T>(train, cfg, &input_shape, epoch);
        let stats = match cfg.method {
            Method::Sigprop if cfg.stages > 1 => {
                epoch_pipeline(net, batches, &ctx, cfg.stages, cfg.queue_capacity)?
            }
            Method::Sigprop => epoch_sequential(net, batches, &ctx)?,
            Method::Bp | Method::Fa | Method::Shallow => {
                let mut stats = EpochStats::default();
                let start = Instant::now();
                for (i, b) in batches.enumerate() {
                    stats.samples += b.labels.len();
                    let local = if cfg.method == Method::Shallow {
                        shallow_step(net, i, &b.x, &b.labels, &ctx)?
                    } else {
                        bp_step(net, i, &b.x, &b.labels, &ctx)?
                    };
                    stats.step_peak = stats
                        .step_peak
                        .max(local.last().map_or(0, |s| s.peak_bytes));
                    stats.extend(local);
                }
                if ctx.timing {
                    stats.step_secs = start.elapsed().as_secs_f64();
                }
                stats
            }
        };
        let eval = evaluate(
            net,
            test,
            cfg.batch.max(256),
            cfg.comparator,
            cfg.logit_sign,
            exits,
        )?;
        let epoch_rows = epoch_rows(&mode, epoch, &stats, &eval, net, cfg)?;
        last_train_err = epoch_rows.last().and_then(|r| r.train_err);
        on_epoch(&epoch_rows);
        rows.extend(epoch_rows);
        last_eval = Some(eval);
    }
    let eval = last_eval.expect("epochs >= 1");
    Ok(TrainReport {
        test_err: eval.error(cfg.predict)?,
        rows,
        eval,
        train_err: last_train_err,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

fn epoch_rows<T: Scalar>(
    mode: &str,
    epoch: usize,
    stats: &EpochStats,
    eval: &EvalReport,
    net: &Network<T>,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    let depth = net.blocks.len();
    let totals = stats.totals();
    let timing = |secs_per_sample: f64| cfg.record_timing.then_some(secs_per_sample);
    let mut rows = Vec::with_capacity(totals.len() + 1);
    for (layer, t) in totals.iter().enumerate() {
        let is_cls = layer == depth;
        rows.push(MetricRow {
            mode: mode.to_string(),
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
            test_err: if is_cls {
                eval.classifier_err
            } else {
                eval.layer_err.get(layer).copied()
            },
        });
    }
    // total local loss J over the hidden blocks for sigprop, the
    // classifier loss for the baselines
    let loss = if cfg.method == Method::Sigprop {
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
    let train_err = totals
        .get(depth)
        .or_else(|| totals.get(depth.saturating_sub(1)))
        .and_then(|t| t.train_err());
    let per_sample = if stats.samples == 0 {
        0.0
    } else {
        stats.step_secs / stats.samples as f64
    };
    rows.push(MetricRow {
        mode: mode.to_string(),
        epoch,
        layer: "step".into(),
        loss,
        time_per_sample_s: timing(per_sample),
        peak_bytes: stats.step_peak,
        train_err,
        test_err: Some(eval.error(cfg.predict)?),
    });
    Ok(rows)
}
