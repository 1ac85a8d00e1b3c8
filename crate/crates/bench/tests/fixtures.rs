use sigprop::optim::Adam;
use sigprop::signal::{Comparator, LogitSign};
use sigprop::trainer::{epoch_sequential, StepContext};
use sigprop_bench::{batches, fc_config, fc_net};

#[test]
fn fixtures_train_one_pass() {
    let cfg = fc_config(vec![12, 12], 8);
    let mut net = fc_net(&cfg, 20, 3);
    let data = batches(3, 8, 20, 3, 0);
    assert_eq!(data[0].x.shape(), &[8, 20]);
    let ctx = StepContext {
        lr: 1e-3,
        adam: Adam::default(),
        cmp: Comparator::Dot,
        sign: LogitSign::Similarity,
        timing: false,
    };
    let stats = epoch_sequential(&mut net, data, &ctx).unwrap();
    assert_eq!(stats.samples, 24);
}
