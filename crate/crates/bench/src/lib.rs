//! Fixtures shared by the benchmarks.

use sigprop::tensor::{RngStream, Tensor};
use sigprop::trainer::{Arch, Batch, Network, TrainConfig};

/// Sigprop config for an fc net on flat `inputs`-wide samples.
pub fn fc_config(hidden: Vec<usize>, batch: usize) -> TrainConfig {
    TrainConfig {
        arch: Arch::Fc {
            hidden,
            batchnorm: false,
            dropout: 0.0,
        },
        batch,
        record_timing: false,
        ..TrainConfig::default()
    }
}

pub fn fc_net(cfg: &TrainConfig, inputs: usize, classes: usize) -> Network<f32> {
    Network::build(cfg, &[1, 1, inputs], classes).expect("valid fixture")
}

/// Random flat microbatches with labels cycling through the classes.
pub fn batches(
    count: usize,
    size: usize,
    inputs: usize,
    classes: usize,
    seed: u64,
) -> Vec<Batch<f32>> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|_| Batch {
            x: Tensor::from_fn(&[size, inputs], |_| rng.uniform(0.0, 1.0)),
            labels: (0..size).map(|i| i % classes).collect(),
        })
        .collect()
}
