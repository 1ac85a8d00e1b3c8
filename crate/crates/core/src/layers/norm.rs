use super::{Caches, Mode, Param, Pass, Stream};
use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics were used, so the normalizer depends on the input.
    batch_stats: bool,
}

/// Per-channel batch normalization over `[n, c]` or `[n, c, h, w]`.
///
/// Batch statistics are used (and the running estimates updated) only for
/// the input stream in training mode. Targets always see the running
/// estimates and never modify them.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub(crate) cache: Caches<NormCache<T>>,
}

fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
            cache: Caches::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let c = self.channels();
        let (n, xc, plane) = layout(x.shape())
            .filter(|&(_, xc, _)| xc == c)
            .ok_or_else(|| Error::dim("batchnorm", x.shape(), &[c]))?;
        debug_assert_eq!(xc, c);
        let count = n * plane;
        if count == 0 {
            return Err(Error::Argument("batchnorm: zero-size batch".into()));
        }
        let batch_stats = pass.stream == Stream::Input && pass.mode == Mode::Train;
        let eps: T = s(self.eps);
        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (i, &v) in x.data().iter().enumerate() {
                mean[(i / plane) % c] += v;
            }
            let inv: T = s(1.0 / count as f64);
            mean.iter_mut().for_each(|m| *m *= inv);
            for (i, &v) in x.data().iter().enumerate() {
                let ch = (i / plane) % c;
                let d = v - mean[ch];
                var[ch] += d * d;
            }
            var.iter_mut().for_each(|v| *v *= inv);
            let mom: T = s(self.momentum);
            let unbias: T = s(count as f64 / (count.max(2) - 1) as f64);
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x;
        for (i, v) in xhat.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut y = xhat.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = *v * g[ch] + b[ch];
        }
        if pass.mode == Mode::Train {
            self.cache.push(
                pass.stream,
                NormCache {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            );
        }
        Ok(y)
    }

    pub fn backward(&mut self, dout: &Tensor<T>, stream: Stream) -> Result<Tensor<T>> {
        let NormCache {
            xhat,
            inv_std,
            batch_stats,
        } = self.cache.pop(stream)?;
        if dout.shape() != xhat.shape() {
            return Err(Error::dim("batchnorm backward", dout.shape(), xhat.shape()));
        }
        let c = self.channels();
        let (n, _, plane) = layout(xhat.shape()).expect("validated in forward");
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (i, (&dy, &xh)) in dout.data().iter().zip(xhat.data()).enumerate() {
            let ch = (i / plane) % c;
            sum_dy[ch] += dy;
            sum_dy_xhat[ch] += dy * xh;
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat[ch];
            self.beta.grad.data_mut()[ch] += sum_dy[ch];
        }
        let g = self.gamma.value.data();
        let count: T = s((n * plane) as f64);
        let mut dx = dout.clone();
        for (i, (v, &xh)) in dx.data_mut().iter_mut().zip(xhat.data()).enumerate() {
            let ch = (i / plane) % c;
            let k = g[ch] * inv_std[ch];
            *v = if batch_stats {
                k * (*v - (sum_dy[ch] + xh * sum_dy_xhat[ch]) / count)
            } else {
                k * *v
            };
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn standardized_batch_is_unchanged() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_f64(&[4, 1], &[-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = bn.forward(x.clone(), Pass::train(Stream::Input)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn target_stream_is_pure() {
        let mut bn = BatchNorm::<f64>::new(3);
        let mut rng = RngStream::new(0);
        let x = Tensor::from_fn(&[8, 3], |_| rng.normal());
        bn.forward(x, Pass::train(Stream::Input)).unwrap();
        let t = Tensor::from_fn(&[5, 3], |_| rng.normal());
        let (rm, rv) = (bn.running_mean.clone(), bn.running_var.clone());
        let first = bn.forward(t.clone(), Pass::train(Stream::Target)).unwrap();
        for _ in 0..5 {
            assert_eq!(
                bn.forward(t.clone(), Pass::train(Stream::Target)).unwrap(),
                first
            );
        }
        assert_eq!(bn.running_mean, rm);
        assert_eq!(bn.running_var, rv);
    }

    #[test]
    fn running_stats_follow_moving_average() {
        let mut bn = BatchNorm::<f64>::new(1);
        let batches = [[1.0, 3.0], [0.0, 4.0], [-2.0, 2.0]];
        let (mut m, mut v) = (0.0, 1.0);
        for b in batches {
            bn.forward(
                Tensor::from_f64(&[2, 1], &b).unwrap(),
                Pass::train(Stream::Input),
            )
            .unwrap();
            let mean = (b[0] + b[1]) / 2.0;
            let unbiased = ((b[0] - mean).powi(2) + (b[1] - mean).powi(2)) / 1.0;
            m = 0.9 * m + 0.1 * mean;
            v = 0.9 * v + 0.1 * unbiased;
        }
        assert!((bn.running_mean.data()[0] - m).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - v).abs() < 1e-12);
    }

    #[test]
    fn zero_size_batch_rejected() {
        let mut bn = BatchNorm::<f64>::new(2);
        let r = bn.forward(Tensor::zeros(&[0, 2]), Pass::train(Stream::Input));
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
