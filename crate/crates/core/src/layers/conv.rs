use super::{Caches, Layout, Mode, Param, Pass, Stream};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_input_grad, conv2d_kernel_grad, init, Init, RngStream, Scalar, Tensor,
};

#[derive(Debug, Clone)]
pub(crate) struct ConvCache<T: Scalar> {
    x: Tensor<T>,
    pad: usize,
}

/// 2-D convolution with bias. `W: [c_out, c_in, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub stride: usize,
    pub pad: usize,
    pub(crate) cache: Caches<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        slope: f64,
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = init(
            &[c_out, c_in, kernel, kernel],
            Init::KaimingUniform { fan_in, slope },
            rng,
        );
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let b = init(&[c_out], Init::Uniform(-bound, bound), rng);
        Self::from_params(w, b, stride, pad).expect("shapes built consistently")
    }

    pub fn from_params(w: Tensor<T>, b: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        if w.ndim() != 4 || b.shape() != [w.shape()[0]] {
            return Err(Error::dim("conv", w.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(Error::Argument("conv: stride must be >= 1".into()));
        }
        Ok(Self {
            w: Param::new(w),
            b: Param::new(b),
            stride,
            pad,
            cache: Caches::default(),
        })
    }

    pub fn kernel_shape(&self) -> &[usize] {
        self.w.value.shape()
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let pad = match pass.layout {
            Layout::Dense => self.pad,
            Layout::Kernel => {
                let k = self.kernel_shape();
                if x.ndim() != 4 || x.shape()[1..] != k[1..] {
                    return Err(Error::dim("conv sparse target", x.shape(), k));
                }
                0
            }
            Layout::Prefix(_) => {
                return Err(Error::Argument(
                    "conv forward: prefix layout applies to dense layers only".into(),
                ))
            }
        };
        let mut y = conv2d(&x, &self.w.value, self.stride, pad)?;
        let (co, plane) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.b.value.data()[(i / plane) % co];
        }
        if pass.mode == Mode::Train {
            self.cache.push(pass.stream, ConvCache { x, pad });
        }
        Ok(y)
    }

    pub fn backward(
        &mut self,
        dout: &Tensor<T>,
        stream: Stream,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let ConvCache { x, pad } = self.cache.pop(stream)?;
        let shape = self.w.value.shape().to_vec();
        let dw = conv2d_kernel_grad(&x, &shape, dout, self.stride, pad)?;
        self.w.grad.add_assign(&dw)?;
        let (co, plane) = (dout.shape()[1], dout.shape()[2] * dout.shape()[3]);
        let db = self.b.grad.data_mut();
        for (i, &g) in dout.data().iter().enumerate() {
            db[(i / plane) % co] += g;
        }
        if !need_input {
            return Ok(None);
        }
        conv2d_input_grad(x.shape(), &self.w.value, dout, self.stride, pad).map(Some)
    }
}
