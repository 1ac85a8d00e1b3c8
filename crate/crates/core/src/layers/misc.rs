use super::{Caches, Mode, Pass, Stream};
use crate::error::{Error, Result};
use crate::tensor::{
    leaky_relu, leaky_relu_grad, maxpool2d, maxpool2d_backward, s, PoolIndices, RngStream, Scalar,
    Tensor,
};

#[derive(Debug, Clone)]
pub struct LeakyRelu<T: Scalar> {
    pub slope: T,
    pub(crate) cache: Caches<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self {
            slope: s(slope),
            cache: Caches::default(),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let y = leaky_relu(&x, self.slope);
        if pass.mode == Mode::Train {
            self.cache
                .push(pass.stream, leaky_relu_grad(&x, self.slope));
        }
        Ok(y)
    }

    pub fn backward(&mut self, dout: &Tensor<T>, stream: Stream) -> Result<Tensor<T>> {
        let gate = self.cache.pop(stream)?;
        dout.mul(&gate)
    }
}

/// Inverted dropout on the input stream; targets pass through untouched.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    rng: RngStream,
    pub(crate) cache: Caches<Option<Vec<bool>>>,
}

impl Dropout {
    pub fn new(rate: f64, rng: RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        Ok(Self {
            rate,
            rng,
            cache: Caches::default(),
        })
    }

    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        if pass.mode == Mode::Eval {
            return Ok(x);
        }
        if pass.stream == Stream::Target || self.rate == 0.0 {
            self.cache.push(pass.stream, None);
            return Ok(x);
        }
        let keep: T = s(1.0 / (1.0 - self.rate));
        let mask: Vec<bool> = (0..x.len())
            .map(|_| !self.rng.bernoulli(self.rate))
            .collect();
        for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
            *v = if m { *v * keep } else { T::zero() };
        }
        self.cache.push(pass.stream, Some(mask));
        Ok(x)
    }

    pub fn backward<T: Scalar>(&mut self, dout: &Tensor<T>, stream: Stream) -> Result<Tensor<T>> {
        let Some(mask) = self.cache.pop(stream)? else {
            return Ok(dout.clone());
        };
        if mask.len() != dout.len() {
            return Err(Error::dim("dropout backward", dout.shape(), &[mask.len()]));
        }
        let keep: T = s(1.0 / (1.0 - self.rate));
        let mut dx = dout.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
            *v = if m { *v * keep } else { T::zero() };
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub k: usize,
    pub(crate) cache: Caches<PoolIndices>,
}

impl MaxPool {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("maxpool: window must be >= 1".into()));
        }
        Ok(Self {
            k,
            cache: Caches::default(),
        })
    }

    pub fn forward<T: Scalar>(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let (y, idx) = maxpool2d(&x, self.k)?;
        if pass.mode == Mode::Train {
            self.cache.push(pass.stream, idx);
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dout: &Tensor<T>, stream: Stream) -> Result<Tensor<T>> {
        let idx = self.cache.pop(stream)?;
        maxpool2d_backward(dout, &idx)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FlattenCache {
    shape: Vec<usize>,
    /// Spatial extent a `1×1` map was broadcast to.
    broadcast: Option<usize>,
}

/// `[n, c, h, w] → [n, c·h·w]`.
///
/// A `1×1` target map is first broadcast to the spatial extent last seen on
/// the input stream, so sparse conv targets can reach fully connected layers.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    spatial: Option<usize>,
    pub(crate) cache: Caches<FlattenCache>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("flatten", &shape, &[0, 0]));
        }
        let plane: usize = shape[2..].iter().product();
        let mut broadcast = None;
        let y = match (pass.stream, self.spatial) {
            (Stream::Input, _) => {
                self.spatial = Some(plane);
                x.flatten2()
            }
            (Stream::Target, Some(p)) if plane == 1 && p > 1 => {
                broadcast = Some(p);
                let (n, c) = (shape[0], shape[1]);
                let src = x.data();
                let mut out = Vec::with_capacity(n * c * p);
                for &v in src {
                    out.extend(std::iter::repeat_n(v, p));
                }
                Tensor::new(&[n, c * p], out)?
            }
            _ => x.flatten2(),
        };
        if pass.mode == Mode::Train {
            self.cache
                .push(pass.stream, FlattenCache { shape, broadcast });
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dout: &Tensor<T>, stream: Stream) -> Result<Tensor<T>> {
        let FlattenCache { shape, broadcast } = self.cache.pop(stream)?;
        match broadcast {
            None => dout.clone().reshape(&shape),
            Some(p) => {
                let data: Vec<T> = dout
                    .data()
                    .chunks(p)
                    .map(|c| c.iter().copied().sum())
                    .collect();
                Tensor::new(&shape, data)
            }
        }
    }
}
