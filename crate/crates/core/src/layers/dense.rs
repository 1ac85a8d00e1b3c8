use super::{Caches, Layout, Mode, Param, Pass, Stream};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, init, Init, RngStream, Scalar, Tensor};

#[derive(Debug, Clone)]
pub(crate) struct DenseCache<T: Scalar> {
    /// Input restricted to its non-zero prefix, `[n, k]`.
    x: Tensor<T>,
    k: usize,
}

/// Affine map `y = x·W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
    /// Fixed matrix shaped like `Wᵀ` used in place of `Wᵀ` when routing the
    /// input gradient (feedback alignment).
    pub feedback: Option<Tensor<T>>,
    pub(crate) cache: Caches<DenseCache<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(d_in: usize, d_out: usize, slope: f64, rng: &mut RngStream) -> Self {
        let w = init(
            &[d_in, d_out],
            Init::KaimingUniform {
                fan_in: d_in,
                slope,
            },
            rng,
        );
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let b = init(&[d_out], Init::Uniform(-bound, bound), rng);
        Self::from_params(w, b).expect("shapes built consistently")
    }

    pub fn from_params(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.ndim() != 2 || b.shape() != [w.shape()[1]] {
            return Err(Error::dim("dense", w.shape(), b.shape()));
        }
        Ok(Self {
            w: Param::new(w),
            b: Param::new(b),
            feedback: None,
            cache: Caches::default(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let d_in = self.d_in();
        if x.ndim() != 2 || x.shape()[1] != d_in {
            return Err(Error::dim("dense forward", x.shape(), self.w.value.shape()));
        }
        let k = match pass.layout {
            Layout::Dense => d_in,
            Layout::Prefix(k) if k >= 1 && k <= d_in => k,
            other => {
                return Err(Error::Argument(format!(
                    "dense forward: unsupported target layout {other:?} for width {d_in}"
                )))
            }
        };
        let x = if k == d_in { x } else { prefix_columns(&x, k) };
        let n = x.rows();
        let d_out = self.d_out();
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(self.b.value.data());
        }
        gemm_acc(
            n,
            k,
            d_out,
            x.data(),
            false,
            &self.w.value.data()[..k * d_out],
            false,
            &mut out,
            T::one(),
        );
        if pass.mode == Mode::Train {
            self.cache.push(pass.stream, DenseCache { x, k });
        }
        Tensor::new(&[n, d_out], out)
    }

    pub fn backward(
        &mut self,
        dout: &Tensor<T>,
        stream: Stream,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let DenseCache { x, k } = self.cache.pop(stream)?;
        let (n, d_out, d_in) = (x.rows(), self.d_out(), self.d_in());
        if dout.shape() != [n, d_out] {
            return Err(Error::dim("dense backward", dout.shape(), &[n, d_out]));
        }
        gemm_acc(
            k,
            n,
            d_out,
            x.data(),
            true,
            dout.data(),
            false,
            &mut self.w.grad.data_mut()[..k * d_out],
            T::one(),
        );
        self.b.grad.add_assign(&dout.sum_rows())?;
        if !need_input {
            return Ok(None);
        }
        if let Some(fb) = &self.feedback {
            return dout.matmul(fb).map(Some);
        }
        let mut dx = vec![T::zero(); n * k];
        gemm_acc(
            n,
            d_out,
            k,
            dout.data(),
            false,
            &self.w.value.data()[..k * d_out],
            true,
            &mut dx,
            T::zero(),
        );
        let dx = Tensor::new(&[n, k], dx)?;
        Ok(Some(if k == d_in {
            dx
        } else {
            zero_extend(&dx, d_in)
        }))
    }
}

/// First `k` columns of a 2-D tensor.
pub fn prefix_columns<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        out.extend_from_slice(&x.row(i)[..k]);
    }
    Tensor::new(&[n, k], out).expect("k <= row length")
}

/// Pads each row of a 2-D tensor with zeros up to `width`.
pub fn zero_extend<T: Scalar>(x: &Tensor<T>, width: usize) -> Tensor<T> {
    let n = x.rows();
    let k = x.row_len();
    debug_assert!(k <= width);
    let mut out = vec![T::zero(); n * width];
    for i in 0..n {
        out[i * width..i * width + k].copy_from_slice(x.row(i));
    }
    Tensor::new(&[n, width], out).expect("consistent extents")
}
