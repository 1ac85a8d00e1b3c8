use sigprop::data::Dataset;
use sigprop::optim::Adam;
use sigprop::signal::{Comparator, LogitSign};
use sigprop::tensor::{RngStream, Tensor};
use sigprop::trainer::{
    epoch_pipeline, epoch_sequential, evaluate, fit, Arch, Batch, Network, StepContext, TrainConfig,
};

fn fc_cfg(hidden: Vec<usize>) -> TrainConfig {
    TrainConfig {
        arch: Arch::Fc {
            hidden,
            batchnorm: false,
            dropout: 0.0,
        },
        batch: 16,
        record_timing: false,
        ..TrainConfig::default()
    }
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

fn batches(count: usize, n: usize, d: usize, seed: u64) -> Vec<Batch<f64>> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|_| Batch {
            x: Tensor::from_fn(&[n, d], |_| rng.uniform(0.0, 1.0)),
            labels: (0..n).map(|_| rng.below(3)).collect(),
        })
        .collect()
}

fn params(net: &Network<f64>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = net
        .blocks
        .iter()
        .flat_map(|b| b.params())
        .map(|p| p.value.data().to_vec())
        .collect();
    if let Some(c) = &net.classifier {
        out.push(c.w.value.data().to_vec());
        out.push(c.b.value.data().to_vec());
    }
    out.extend(
        net.generator
            .named_params()
            .into_iter()
            .map(|(_, p)| p.value.data().to_vec()),
    );
    out
}

/// Four separable classes: the bright quarter of a 4×4 image is the label.
fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let images = Tensor::from_fn(&[n, 1, 4, 4], |i| {
        let (s, p) = (i / 16, i % 16);
        let on = p / 4 == labels[s];
        (if on { 0.8 } else { 0.2 }) + rng.uniform::<f32>(-0.15, 0.15)
    });
    Dataset::new(images, labels, 4).unwrap()
}

#[test]
fn pipeline_of_any_depth_matches_sequential_exactly() {
    let cfg = fc_cfg(vec![7, 6, 5, 4]);
    let data = batches(6, 5, 9, 1);
    let mut seq = Network::<f64>::build(&cfg, &[1, 3, 3], 3).unwrap();
    let reference = seq.clone();
    let s = epoch_sequential(&mut seq, data.clone(), &ctx(1e-2)).unwrap();
    for stages in 1..=4 {
        let mut pipe = reference.clone();
        let p = epoch_pipeline(&mut pipe, data.clone(), &ctx(1e-2), stages, 2).unwrap();
        assert_eq!(params(&pipe), params(&seq), "{stages} stages");
        assert_eq!(
            p.totals().iter().map(|t| t.loss_sum).collect::<Vec<_>>(),
            s.totals().iter().map(|t| t.loss_sum).collect::<Vec<_>>()
        );
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = fc_cfg(vec![6, 5]);
    let mut net = Network::<f64>::build(&cfg, &[1, 3, 3], 3).unwrap();
    let before = params(&net);
    epoch_sequential(&mut net, batches(3, 4, 9, 2), &ctx(0.0)).unwrap();
    assert_eq!(params(&net), before);
}

#[test]
fn a_block_update_ignores_later_blocks() {
    let cfg = fc_cfg(vec![6, 5, 4]);
    let mut a = Network::<f64>::build(&cfg, &[1, 3, 3], 3).unwrap();
    let mut b = a.clone();
    for p in b.blocks[1..].iter_mut().flat_map(|blk| blk.params_mut()) {
        p.value.map_inplace(|v| v * -3.0 + 0.1);
    }
    let data = batches(1, 4, 9, 3);
    epoch_sequential(&mut a, data.clone(), &ctx(1e-2)).unwrap();
    epoch_sequential(&mut b, data, &ctx(1e-2)).unwrap();
    let first = |n: &Network<f64>| {
        n.blocks[0]
            .params()
            .iter()
            .map(|p| p.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(first(&a), first(&b));
}

#[test]
fn no_forward_state_outlives_a_step() {
    let cfg = fc_cfg(vec![6, 5, 4]);
    let mut net = Network::<f64>::build(&cfg, &[1, 3, 3], 3).unwrap();
    for count in [1, 5] {
        epoch_sequential(&mut net, batches(count, 4, 9, 4), &ctx(1e-3)).unwrap();
        assert_eq!(net.cached_entries(), 0);
    }
    epoch_pipeline(&mut net, batches(5, 4, 9, 5), &ctx(1e-3), 3, 2).unwrap();
    assert_eq!(net.cached_entries(), 0);
}

#[test]
fn fit_lowers_loss_and_exits_beat_chance() {
    let train = toy_dataset(128, 1);
    let test = toy_dataset(64, 2);
    let cfg = TrainConfig {
        lr: 5e-3,
        epochs: 6,
        ..fc_cfg(vec![16, 16])
    };
    let mut net = Network::<f64>::build(&cfg, &[1, 4, 4], 4).unwrap();
    let report = fit(&mut net, &train, &test, &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.layer == "step")
        .filter_map(|r| r.loss)
        .collect();
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "{losses:?}"
    );
    assert!(
        report.eval.layer_err[0] < 0.75,
        "{:?}",
        report.eval.layer_err
    );
    assert!(report.test_err < 0.75);
}

#[test]
fn empty_dataset_evaluates_to_zero_error() {
    let cfg = fc_cfg(vec![5]);
    let mut net = Network::<f64>::build(&cfg, &[1, 4, 4], 4).unwrap();
    let empty = Dataset::new(Tensor::zeros(&[0, 1, 4, 4]), vec![], 4).unwrap();
    let r = evaluate(
        &mut net,
        &empty,
        8,
        Comparator::Dot,
        LogitSign::Similarity,
        true,
    )
    .unwrap();
    assert!(r.empty);
    assert_eq!(r.samples, 0);
    assert_eq!(r.classifier_err, Some(0.0));
}

#[test]
fn per_layer_peak_is_flat_in_depth() {
    let peak = |depth: usize| {
        let cfg = fc_cfg(vec![32; depth]);
        let mut net = Network::<f32>::build(&cfg, &[1, 4, 8], 3).unwrap();
        let mut rng = RngStream::new(6);
        let data: Vec<Batch<f32>> = (0..3)
            .map(|_| Batch {
                x: Tensor::from_fn(&[16, 32], |_| rng.uniform(0.0, 1.0)),
                labels: (0..16).map(|i| i % 3).collect(),
            })
            .collect();
        let stats = epoch_sequential(&mut net, data, &ctx(1e-3)).unwrap();
        let totals = stats.totals();
        // hidden blocks only; the classifier is the same in both nets
        totals[..depth].iter().map(|t| t.peak_bytes).max().unwrap()
    };
    let (shallow, deep) = (peak(4) as f64, peak(16) as f64);
    assert!((deep / shallow - 1.0).abs() <= 0.10, "{shallow} vs {deep}");
}
