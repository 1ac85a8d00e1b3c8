use super::stage::Stage;
use super::{Arch, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm, Block, Conv2d, Dense, Dropout, Flatten, LeakyRelu, MaxPool, Op, Pass, Stream,
};
use crate::signal::{one_hot, Placement, SparseSpec, TargetGenerator, Variant};
use crate::tensor::{RngStream, Scalar, Tensor};

/// Output-side context consumed by the loop generators.
#[derive(Debug, Clone)]
pub(crate) enum LoopContext<T: Scalar> {
    /// Softmax prediction of the classifier.
    Pred(Tensor<T>),
    /// Last block output and its per-sample error.
    Err { h: Tensor<T>, e: Tensor<T> },
}

/// Hidden blocks, optional classifier and the target generator.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub blocks: Vec<Block<T>>,
    pub classifier: Option<Dense<T>>,
    pub generator: TargetGenerator<T>,
    pub classes: usize,
    /// Per-sample input shape of the first block.
    pub input_shape: Vec<usize>,
    /// Per-sample output shape of every block.
    pub block_shapes: Vec<Vec<usize>>,
}

fn fc_block<T: Scalar>(
    d_in: usize,
    d_out: usize,
    flatten: bool,
    batchnorm: bool,
    dropout: f64,
    slope: f64,
    rng: &mut RngStream,
) -> Result<Block<T>> {
    let mut ops = Vec::new();
    if flatten {
        ops.push(Op::Flatten(Flatten::new()));
    }
    ops.push(Op::Dense(Dense::new(d_in, d_out, slope, rng)));
    if batchnorm {
        ops.push(Op::BatchNorm(BatchNorm::new(d_out)));
    }
    ops.push(Op::LeakyRelu(LeakyRelu::new(slope)));
    if dropout > 0.0 {
        ops.push(Op::Dropout(Dropout::new(dropout, rng.fork(1))?));
    }
    Ok(Block::new(ops))
}

impl<T: Scalar> Network<T> {
    /// Builds the network for images of shape `[c, h, w]`.
    pub fn build(cfg: &TrainConfig, image_shape: &[usize], classes: usize) -> Result<Self> {
        let root = RngStream::new(cfg.seed);
        let slope = cfg.slope;
        let mut blocks = Vec::new();
        let input_shape: Vec<usize> = match &cfg.arch {
            Arch::Fc {
                hidden,
                batchnorm,
                dropout,
            } => {
                let mut d = image_shape.iter().product();
                for (i, &w) in hidden.iter().enumerate() {
                    let mut rng = root.fork(1 + i as u64);
                    blocks.push(fc_block(
                        d, w, false, *batchnorm, *dropout, slope, &mut rng,
                    )?);
                    d = w;
                }
                vec![image_shape.iter().product()]
            }
            Arch::Conv {
                channels,
                pool,
                fc_hidden,
                batchnorm,
                dropout,
            } => {
                if image_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "conv network needs [c,h,w] images, got {image_shape:?}"
                    )));
                }
                let (mut c, mut side_h, mut side_w) =
                    (image_shape[0], image_shape[1], image_shape[2]);
                for (i, &co) in channels.iter().enumerate() {
                    let mut rng = root.fork(1 + i as u64);
                    let mut ops = vec![Op::Conv(Conv2d::new(c, co, 3, 1, 1, slope, &mut rng))];
                    if *batchnorm {
                        ops.push(Op::BatchNorm(BatchNorm::new(co)));
                    }
                    ops.push(Op::LeakyRelu(LeakyRelu::new(slope)));
                    if pool.get(i).copied().unwrap_or(false) {
                        ops.push(Op::MaxPool(MaxPool::new(2)?));
                        side_h = side_h.div_ceil(2);
                        side_w = side_w.div_ceil(2);
                    }
                    if *dropout > 0.0 {
                        ops.push(Op::Dropout(Dropout::new(*dropout, rng.fork(1))?));
                    }
                    blocks.push(Block::new(ops));
                    c = co;
                }
                let mut d = c * side_h * side_w;
                for (j, &w) in fc_hidden.iter().enumerate() {
                    let mut rng = root.fork(1 + (channels.len() + j) as u64);
                    blocks.push(fc_block(
                        d,
                        w,
                        j == 0,
                        *batchnorm,
                        *dropout,
                        slope,
                        &mut rng,
                    )?);
                    d = w;
                }
                image_shape.to_vec()
            }
        };

        let mut probe_shape = vec![1];
        probe_shape.extend_from_slice(&input_shape);
        let mut x = Tensor::<T>::zeros(&probe_shape);
        let mut block_shapes = Vec::with_capacity(blocks.len());
        for b in &mut blocks {
            x = b.forward(x, Pass::eval(Stream::Input))?;
            block_shapes.push(x.shape()[1..].to_vec());
        }
        let last_width: usize = block_shapes.last().map_or(0, |s| s.iter().product());

        let gcfg = cfg.generator.clone();
        let target_shape: Vec<usize> = match (gcfg.placement, gcfg.sparse) {
            (Placement::FirstHidden, _) => block_shapes[0].clone(),
            (Placement::Input, SparseSpec::Conv) => vec![input_shape[0], 3, 3],
            (Placement::Input, _) => input_shape.clone(),
        };
        let context = if gcfg.variant == Variant::TargetLoopErr {
            last_width
        } else {
            classes
        };
        let generator =
            TargetGenerator::new(gcfg, classes, context, &target_shape, &mut root.fork(200))?;
        let classifier = cfg
            .classifier
            .then(|| Dense::new(last_width, classes, slope, &mut root.fork(100)));
        Ok(Self {
            blocks,
            classifier,
            generator,
            classes,
            input_shape,
            block_shapes,
        })
    }

    /// Reshapes a batch of images to what the first block expects.
    pub fn prepare_input(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![x.shape()[0]];
        shape.extend_from_slice(&self.input_shape);
        x.reshape(&shape)
    }

    /// Runs every block in evaluation mode.
    pub fn forward_eval(&mut self, mut x: Tensor<T>) -> Result<Tensor<T>> {
        for b in &mut self.blocks {
            x = b.forward(x, Pass::eval(Stream::Input))?;
        }
        Ok(x)
    }

    /// Classifier logits of the last block output.
    pub fn logits(&mut self, h_last: &Tensor<T>) -> Result<Tensor<T>> {
        let cls = self
            .classifier
            .as_mut()
            .ok_or_else(|| Error::Config("network has no classifier layer".into()))?;
        cls.forward(h_last.clone().flatten2(), Pass::eval(Stream::Input))
    }

    pub(crate) fn loop_context(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<LoopContext<T>> {
        let h = self.forward_eval(x.clone())?;
        self.loop_context_from(&h, labels)
    }

    /// Builds the loop-generator context from a finished forward output.
    pub(crate) fn loop_context_from(
        &mut self,
        h_last: &Tensor<T>,
        labels: &[usize],
    ) -> Result<LoopContext<T>> {
        let logits = self.logits(h_last)?;
        let p = softmax_rows(&logits);
        match self.generator.cfg.variant {
            Variant::TargetLoopPred => Ok(LoopContext::Pred(p)),
            Variant::TargetLoopErr => {
                let cls = self.classifier.as_ref().expect("checked by logits");
                let e = p
                    .sub(&one_hot(labels, self.classes))?
                    .matmul_t(&cls.w.value)?;
                Ok(LoopContext::Err {
                    h: h_last.clone().flatten2(),
                    e,
                })
            }
            v => Err(Error::Protocol(format!("{v:?} has no loop context"))),
        }
    }

    /// Splits the blocks into `k` contiguous stages of near-equal length.
    pub(crate) fn stages(&mut self, k: usize) -> Result<Vec<Stage<'_, T>>> {
        let n = self.blocks.len();
        if k == 0 || k > n {
            return Err(Error::Pipeline(format!("{k} stages for {n} blocks")));
        }
        let mut rest: &mut [Block<T>] = &mut self.blocks;
        let mut generator = Some(&mut self.generator);
        let mut classifier = self.classifier.as_mut();
        let mut out = Vec::with_capacity(k);
        let mut offset = 0;
        for i in 0..k {
            let size = n / k + usize::from(i < n % k);
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(size);
            rest = tail;
            out.push(Stage {
                offset,
                blocks: head,
                generator: if i == 0 { generator.take() } else { None },
                classifier: if i == k - 1 { classifier.take() } else { None },
            });
            offset += size;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        let cls = self
            .classifier
            .as_ref()
            .map_or(0, |c| c.w.value.len() + c.b.value.len());
        self.blocks.iter().map(Block::param_count).sum::<usize>() + cls
    }

    /// Cached forward states across all blocks and the generator.
    pub fn cached_entries(&self) -> usize {
        self.blocks.iter().map(Block::cached_entries).sum::<usize>()
            + self.generator.cached_entries()
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = format!("block{i}");
            names.extend(b.named_params(&prefix).into_iter().map(|(n, _)| n));
            for (j, op) in b.ops.iter().enumerate() {
                if matches!(op, Op::BatchNorm(_)) {
                    names.push(format!("{prefix}.{j}.batchnorm.running_mean"));
                    names.push(format!("{prefix}.{j}.batchnorm.running_var"));
                }
            }
        }
        if self.classifier.is_some() {
            names.push("classifier.w".into());
            names.push("classifier.b".into());
        }
        names.extend(self.generator.named_params().into_iter().map(|(n, _)| n));
        names
    }

    /// Every persistent tensor in [`Self::tensor_names`] order.
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.blocks {
            let mut stats = Vec::new();
            for op in &mut b.ops {
                match op {
                    Op::BatchNorm(bn) => {
                        out.push(&mut bn.gamma.value);
                        out.push(&mut bn.beta.value);
                        stats.push(&mut bn.running_mean);
                        stats.push(&mut bn.running_var);
                    }
                    Op::Dense(l) => {
                        out.push(&mut l.w.value);
                        out.push(&mut l.b.value);
                    }
                    Op::Conv(l) => {
                        out.push(&mut l.w.value);
                        out.push(&mut l.b.value);
                    }
                    _ => {}
                }
            }
            out.extend(stats);
        }
        if let Some(c) = self.classifier.as_mut() {
            out.push(&mut c.w.value);
            out.push(&mut c.b.value);
        }
        out.extend(
            self.generator
                .params_mut()
                .into_iter()
                .map(|p| &mut p.value),
        );
        out
    }

    pub fn checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint<T> {
        let names = self.tensor_names();
        let mut copy = self.clone();
        let tensors = names
            .into_iter()
            .zip(copy.tensors_mut().into_iter().map(|t| t.clone()))
            .collect();
        Checkpoint {
            seed,
            epoch,
            tensors,
        }
    }

    /// Copies every tensor of a matching checkpoint into the network.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let names = self.tensor_names();
        for (name, dst) in names.iter().zip(self.tensors_mut()) {
            let src = ckpt
                .get(name)
                .ok_or_else(|| Error::Argument(format!("checkpoint lacks tensor '{name}'")))?;
            if src.shape() != dst.shape() {
                return Err(Error::dim("load_checkpoint", src.shape(), dst.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut p = logits.clone();
    for j in 0..p.rows() {
        let row = p.row_mut(j);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            arch: Arch::Fc {
                hidden: vec![6, 5],
                batchnorm: true,
                dropout: 0.0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fc_shapes() {
        let net = Network::<f64>::build(&small_cfg(), &[1, 2, 2], 3).unwrap();
        assert_eq!(net.input_shape, vec![4]);
        assert_eq!(net.block_shapes, vec![vec![6], vec![5]]);
        assert_eq!(net.generator.target_shape(), &[6]);
        assert_eq!(net.classifier.as_ref().unwrap().d_in(), 5);
    }

    #[test]
    fn conv_shapes() {
        let cfg = TrainConfig {
            arch: Arch::Conv {
                channels: vec![4, 8],
                pool: vec![true, true],
                fc_hidden: vec![10],
                batchnorm: true,
                dropout: 0.1,
            },
            ..TrainConfig::default()
        };
        let net = Network::<f32>::build(&cfg, &[1, 8, 8], 10).unwrap();
        assert_eq!(
            net.block_shapes,
            vec![vec![4, 4, 4], vec![8, 2, 2], vec![10]]
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Network::<f64>::build(&small_cfg(), &[1, 2, 2], 3).unwrap();
        let mut other = small_cfg();
        other.seed = 99;
        let mut b = Network::<f64>::build(&other, &[1, 2, 2], 3).unwrap();
        let ck = a.checkpoint(0, 1);
        assert!(ck.get("block0.0.dense.w").is_some());
        assert!(ck.get("block1.1.batchnorm.running_var").is_some());
        assert!(ck.get("gen.s1.w").is_some());
        b.load_checkpoint(&ck).unwrap();
        assert_eq!(b.checkpoint(0, 1), ck);
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(
            &Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        for j in 0..2 {
            assert!((p.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((p.row(1)[0] - 1.0 / 3.0).abs() < 1e-12);
    }
}
