use std::sync::mpsc::{channel, sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::Instant;

use super::metrics::{EpochStats, LayerStat};
use super::network::Network;
use super::stage::{Flight, StepContext};
use crate::error::{Error, Result};
use crate::tensor::{flush_subnormals, MemoryScope, Scalar, Tensor};

/// A prepared microbatch: inputs already shaped for the first block.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Sigprop over a stream of batches on the calling thread.
pub fn epoch_sequential<T: Scalar>(
    net: &mut Network<T>,
    batches: impl IntoIterator<Item = Batch<T>>,
    ctx: &StepContext,
) -> Result<EpochStats> {
    flush_subnormals();
    let mut stats = EpochStats::default();
    let start = Instant::now();
    let looped = net.generator.cfg.variant.is_loop();
    for (index, b) in batches.into_iter().enumerate() {
        let scope = MemoryScope::enter();
        stats.samples += b.labels.len();
        let context = if looped {
            Some(net.loop_context(&b.x, &b.labels)?)
        } else {
            None
        };
        let flight = Flight::new(index, b.x, b.labels, context);
        let mut local = Vec::new();
        {
            let mut stages = net.stages(1)?;
            stages[0].process(flight, ctx, &mut local)?;
        }
        stats.extend(local);
        stats.step_peak = stats.step_peak.max(scope.peak());
    }
    if ctx.timing {
        stats.step_secs = start.elapsed().as_secs_f64();
    }
    Ok(stats)
}

/// Sigprop with one worker per stage connected by bounded queues.
///
/// Each stage handles microbatches in stream order and updates its own
/// blocks as soon as a microbatch arrives, so parameter trajectories equal
/// those of [`epoch_sequential`] for any stage count.
pub fn epoch_pipeline<T: Scalar>(
    net: &mut Network<T>,
    batches: impl IntoIterator<Item = Batch<T>>,
    ctx: &StepContext,
    stage_count: usize,
    capacity: usize,
) -> Result<EpochStats> {
    if net.generator.cfg.variant.is_loop() {
        return Err(Error::Config("loop generators cannot be pipelined".into()));
    }
    let stages = net.stages(stage_count)?;
    let k = stages.len();
    let mut senders: Vec<Option<SyncSender<Flight<T>>>> = Vec::with_capacity(k);
    let mut receivers: Vec<Receiver<Flight<T>>> = Vec::with_capacity(k);
    for _ in 0..k {
        let (tx, rx) = sync_channel(capacity.max(1));
        senders.push(Some(tx));
        receivers.push(rx);
    }
    let (stats_tx, stats_rx) = channel::<Vec<LayerStat>>();
    let ctx = *ctx;
    let start = Instant::now();
    let mut fed = 0usize;

    let outcomes: Vec<Result<u64>> = thread::scope(|scope| {
        let first = senders[0].take().expect("created above");
        let mut handles = Vec::with_capacity(k);
        for (si, (mut stage, rx)) in stages.into_iter().zip(receivers).enumerate() {
            let downstream = senders.get_mut(si + 1).and_then(Option::take);
            let stats_tx = stats_tx.clone();
            handles.push(scope.spawn(move || -> Result<u64> {
                flush_subnormals();
                let mut peak = 0u64;
                for flight in rx {
                    let mut local = Vec::new();
                    let out = stage.process(flight, &ctx, &mut local)?;
                    // each layer is charged with its input already live
                    peak = local.iter().map(|s| s.peak_bytes).fold(peak, u64::max);
                    let _ = stats_tx.send(local);
                    if let Some(tx) = &downstream {
                        tx.send(out).map_err(|_| {
                            Error::Pipeline(format!("stage {} stopped early", si + 1))
                        })?;
                    }
                }
                Ok(peak)
            }));
        }
        for (index, b) in batches.into_iter().enumerate() {
            fed += b.labels.len();
            if first.send(Flight::new(index, b.x, b.labels, None)).is_err() {
                break;
            }
        }
        drop(first);
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Pipeline("stage worker panicked".into())))
            })
            .collect()
    });
    drop(stats_tx);

    // report the root cause rather than the knock-on queue shutdowns
    let mut first_err = None;
    let mut peak = 0;
    for r in outcomes {
        match r {
            Ok(p) => peak = peak.max(p),
            Err(Error::Pipeline(m)) => {
                first_err.get_or_insert(Error::Pipeline(m));
            }
            Err(e) => {
                if !matches!(first_err, Some(ref f) if !matches!(f, Error::Pipeline(_))) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let mut stats = EpochStats {
        samples: fed,
        step_peak: peak,
        ..EpochStats::default()
    };
    for local in stats_rx {
        stats.extend(local);
    }
    if ctx.timing {
        stats.step_secs = start.elapsed().as_secs_f64();
    }
    Ok(stats)
}
