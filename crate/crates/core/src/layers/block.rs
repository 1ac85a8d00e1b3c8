use super::{Layout, Op, Param, Pass, Stream};
use crate::error::Result;
use crate::optim::Adam;
use crate::tensor::{Scalar, Tensor};

/// A chain of ops trained as one unit by a single local loss.
#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ops: Vec<Op<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn new(ops: Vec<Op<T>>) -> Self {
        Self { ops }
    }

    /// Runs every op in order. A sparse layout hint is consumed by the first
    /// affine op; everything after it sees a dense tensor.
    pub fn forward(&mut self, mut x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let mut layout = pass.layout;
        for op in &mut self.ops {
            let affine = matches!(op, Op::Dense(_) | Op::Conv(_));
            let p = Pass {
                layout: if affine { layout } else { Layout::Dense },
                ..pass
            };
            x = op.forward(x, p)?;
            if affine {
                layout = Layout::Dense;
            }
        }
        Ok(x)
    }

    /// Pops one cached microbatch from every op and accumulates parameter
    /// gradients. The input gradient is computed only as far back as needed.
    pub fn backward(
        &mut self,
        dout: &Tensor<T>,
        stream: Stream,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let first_param = self.ops.iter().position(Op::has_params);
        let mut grad = dout.clone();
        for i in (0..self.ops.len()).rev() {
            let want = need_input || first_param.is_some_and(|f| i > f);
            match self.ops[i].backward(&grad, stream, want)? {
                Some(g) if want => grad = g,
                _ => {
                    for op in &mut self.ops[..i] {
                        op.discard(stream)?;
                    }
                    return Ok(None);
                }
            }
        }
        Ok(Some(grad))
    }

    pub fn discard(&mut self, stream: Stream) -> Result<()> {
        for op in &mut self.ops {
            op.discard(stream)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.ops.iter().flat_map(Op::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.ops.iter_mut().flat_map(Op::params_mut).collect()
    }

    /// Parameter names of the form `{prefix}.{op index}.{kind}.{w|b}`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            let suffixes: &[&str] = match op {
                Op::BatchNorm(_) => &["gamma", "beta"],
                _ => &["w", "b"],
            };
            for (p, s) in op.params().into_iter().zip(suffixes) {
                out.push((format!("{prefix}.{i}.{}.{s}", op.kind()), p));
            }
        }
        out
    }

    /// Named parameters followed by batch-norm running statistics, cloned.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .named_params(prefix)
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::BatchNorm(bn) = op {
                out.push((
                    format!("{prefix}.{i}.batchnorm.running_mean"),
                    bn.running_mean.clone(),
                ));
                out.push((
                    format!("{prefix}.{i}.batchnorm.running_var"),
                    bn.running_var.clone(),
                ));
            }
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
        self.ops.iter().map(Op::cached_entries).sum()
    }

    pub fn clear_cache(&mut self) {
        self.ops.iter_mut().for_each(Op::clear_cache);
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}
