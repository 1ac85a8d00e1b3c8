//! Layer-local training loops (sequential and pipelined), evaluation and the
//! metrics harness.
//!
//! A training step moves a [`Flight`](stage) through the network. At every
//! block the input and target streams are forwarded, the local prediction
//! loss is evaluated, the block is updated on the spot and the detached
//! activations move on. Because no gradient ever crosses a block boundary,
//! the blocks can be split into pipeline stages that each own their
//! parameters outright.

mod eval;
mod fit;
mod metrics;
mod network;
mod pipeline;
mod stage;

pub use eval::{evaluate, EvalReport};
pub use fit::{fit, TrainReport};
pub use metrics::{write_csv, EpochStats, LayerStat, MetricRow, Summary};
pub use network::Network;
pub use pipeline::{epoch_pipeline, epoch_sequential, Batch};
pub(crate) use stage::classifier_step;
pub use stage::StepContext;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, StepDecay};
use crate::signal::{Comparator, GeneratorConfig, LogitSign, Placement, SparseSpec};

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// Fully connected blocks `Dense → [BN] → LeakyReLU → [Dropout]`.
    Fc {
        hidden: Vec<usize>,
        #[serde(default)]
        batchnorm: bool,
        #[serde(default)]
        dropout: f64,
    },
    /// 3×3 conv blocks `Conv → [BN] → LeakyReLU → [MaxPool2] → [Dropout]`
    /// followed by fully connected blocks.
    Conv {
        channels: Vec<usize>,
        /// Pool after conv block `i`; missing entries mean no pooling.
        #[serde(default)]
        pool: Vec<bool>,
        #[serde(default)]
        fc_hidden: Vec<usize>,
        #[serde(default)]
        batchnorm: bool,
        #[serde(default)]
        dropout: f64,
    },
}

impl Arch {
    pub fn depth(&self) -> usize {
        match self {
            Arch::Fc { hidden, .. } => hidden.len(),
            Arch::Conv {
                channels,
                fc_hidden,
                ..
            } => channels.len() + fc_hidden.len(),
        }
    }
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Fc {
            hidden: vec![800, 800],
            batchnorm: false,
            dropout: 0.0,
        }
    }
}

/// Learning rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sigprop,
    Bp,
    Fa,
    Shallow,
}

/// How the class of a sample is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    Classifier,
    OutputTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub arch: Arch,
    pub method: Method,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub milestones: Vec<f64>,
    pub adam: Adam,
    pub seed: u64,
    pub slope: f64,
    pub generator: GeneratorConfig,
    pub comparator: Comparator,
    pub logit_sign: LogitSign,
    pub classifier: bool,
    pub predict: PredictMode,
    pub augment: bool,
    /// Pipeline stages; `1` trains sequentially on the calling thread.
    pub stages: usize,
    /// Capacity of each inter-stage hand-off queue.
    pub queue_capacity: usize,
    /// Record wall-clock times; off makes the metrics CSV byte-reproducible.
    pub record_timing: bool,
    /// Also report output-target (early-exit) errors for every block.
    pub early_exits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let decay = StepDecay::default();
        Self {
            dataset: "mnist".into(),
            train_subset: None,
            test_subset: None,
            arch: Arch::default(),
            method: Method::Sigprop,
            epochs: 20,
            batch: 128,
            lr: decay.lr,
            decay_factor: decay.factor,
            milestones: decay.milestones,
            adam: Adam::default(),
            seed: 0,
            slope: 0.01,
            generator: GeneratorConfig::default(),
            comparator: Comparator::Dot,
            logit_sign: LogitSign::Similarity,
            classifier: true,
            predict: PredictMode::Classifier,
            augment: false,
            stages: 1,
            queue_capacity: 8,
            record_timing: true,
            early_exits: true,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            lr: self.lr,
            factor: self.decay_factor,
            milestones: self.milestones.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be at least 1".into());
        }
        if self.milestones.iter().any(|&f| !(f > 0.0 && f < 1.0))
            || self.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "milestones must be ascending in (0, 1): {:?}",
                self.milestones
            ));
        }
        if self.arch.depth() == 0 {
            return bad("network needs at least one hidden block".into());
        }
        if self.stages == 0 || self.stages > self.arch.depth() {
            return bad(format!(
                "stages must be in 1..={}, got {}",
                self.arch.depth(),
                self.stages
            ));
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1".into());
        }
        let rate = match &self.arch {
            Arch::Fc { dropout, .. } | Arch::Conv { dropout, .. } => *dropout,
        };
        if !(0.0..1.0).contains(&rate) {
            return bad(format!("dropout must be in [0, 1), got {rate}"));
        }
        let variant = self.generator.variant;
        if self.method == Method::Sigprop {
            if variant.is_loop() && !self.classifier {
                return bad("loop generators need the classifier layer".into());
            }
            if variant.is_loop() && self.stages > 1 {
                return bad(
                    "loop generators feed back from the output and cannot be pipelined".into(),
                );
            }
            if let (SparseSpec::Fc { .. }, Arch::Conv { .. }) = (self.generator.sparse, &self.arch)
            {
                if self.generator.placement == Placement::Input {
                    return bad("fc sparse targets at the input need an fc network".into());
                }
            }
            if self.generator.sparse == SparseSpec::Conv && !matches!(self.arch, Arch::Conv { .. })
            {
                return bad("conv sparse targets need a conv network".into());
            }
        } else if self.stages > 1 {
            return bad("only sigprop can be pipelined".into());
        }
        if matches!(self.method, Method::Bp | Method::Fa | Method::Shallow) && !self.classifier {
            return bad("baselines train through the classifier layer".into());
        }
        if self.method == Method::Fa && !matches!(self.arch, Arch::Fc { .. }) {
            return bad("feedback alignment is implemented for fc networks".into());
        }
        if self.predict == PredictMode::Classifier && !self.classifier {
            return bad("classifier prediction without a classifier layer".into());
        }
        if self.predict == PredictMode::OutputTarget && self.method != Method::Sigprop {
            return bad("output-target prediction needs trained targets (sigprop)".into());
        }
        Ok(())
    }

    /// Mode label used in metrics rows.
    pub fn mode_label(&self) -> &'static str {
        match (self.method, self.stages > 1) {
            (Method::Sigprop, false) => "sp_sequential",
            (Method::Sigprop, true) => "sp_pipeline",
            (Method::Bp, _) => "bp",
            (Method::Fa, _) => "fa",
            (Method::Shallow, _) => "shallow",
        }
    }
}
