use super::{gemm_acc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided, padded window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
    op: &'static str,
) -> Result<ConvGeom> {
    if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
        return Err(Error::dim(op, input, kernel));
    }
    if stride == 0 {
        return Err(Error::Argument(format!("{op}: stride must be >= 1")));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (co, kh, kw) = (kernel[0], kernel[2], kernel[3]);
    let oh = conv_out_extent(h, kh, stride, pad).ok_or_else(|| Error::dim(op, input, kernel))?;
    let ow = conv_out_extent(w, kw, stride, pad).ok_or_else(|| Error::dim(op, input, kernel))?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        co,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

/// Unfolds one `[c, h, w]` image into `[c·kh·kw, oh·ow]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for (oj, d) in line.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `img`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    img: &mut [T],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            img[base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, no bias. `input: [n,c,h,w]`, `kernel: [co,c,kh,kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input.shape(), kernel.shape(), stride, pad, "conv2d")?;
    let krows = g.c * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.co * plane];
    let mut cols = vec![T::zero(); krows * plane];
    let img_len = g.c * g.h * g.w;
    for i in 0..g.n {
        let img = &input.data()[i * img_len..(i + 1) * img_len];
        im2col(img, g.c, g.h, g.w, g.kh, g.kw, g.stride, g.pad, &mut cols);
        let dst = &mut out[i * g.co * plane..(i + 1) * g.co * plane];
        gemm_acc(
            g.co,
            krows,
            plane,
            kernel.data(),
            false,
            &cols,
            false,
            dst,
            T::zero(),
        );
    }
    Tensor::new(&[g.n, g.co, g.oh, g.ow], out)
}

/// Gradient of a scalar loss w.r.t. the kernel, given `dout = ∂L/∂conv2d(input)`.
pub fn conv2d_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    kernel_shape: &[usize],
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(
        input.shape(),
        kernel_shape,
        stride,
        pad,
        "conv2d_kernel_grad",
    )?;
    if dout.shape() != [g.n, g.co, g.oh, g.ow] {
        return Err(Error::dim(
            "conv2d_kernel_grad",
            dout.shape(),
            &[g.n, g.co, g.oh, g.ow],
        ));
    }
    let krows = g.c * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let mut dk = vec![T::zero(); g.co * krows];
    let mut cols = vec![T::zero(); krows * plane];
    let img_len = g.c * g.h * g.w;
    for i in 0..g.n {
        let img = &input.data()[i * img_len..(i + 1) * img_len];
        im2col(img, g.c, g.h, g.w, g.kh, g.kw, g.stride, g.pad, &mut cols);
        let d = &dout.data()[i * g.co * plane..(i + 1) * g.co * plane];
        gemm_acc(g.co, plane, krows, d, false, &cols, true, &mut dk, T::one());
    }
    Tensor::new(kernel_shape, dk)
}

/// Gradient w.r.t. the input of [`conv2d`].
pub fn conv2d_input_grad<T: Scalar>(
    input_shape: &[usize],
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(
        input_shape,
        kernel.shape(),
        stride,
        pad,
        "conv2d_input_grad",
    )?;
    if dout.shape() != [g.n, g.co, g.oh, g.ow] {
        return Err(Error::dim(
            "conv2d_input_grad",
            dout.shape(),
            &[g.n, g.co, g.oh, g.ow],
        ));
    }
    let krows = g.c * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let img_len = g.c * g.h * g.w;
    let mut dx = vec![T::zero(); g.n * img_len];
    let mut dcols = vec![T::zero(); krows * plane];
    for i in 0..g.n {
        let d = &dout.data()[i * g.co * plane..(i + 1) * g.co * plane];
        gemm_acc(
            krows,
            g.co,
            plane,
            kernel.data(),
            true,
            d,
            false,
            &mut dcols,
            T::zero(),
        );
        col2im(
            &dcols,
            g.c,
            g.h,
            g.w,
            g.kh,
            g.kw,
            g.stride,
            g.pad,
            &mut dx[i * img_len..(i + 1) * img_len],
        );
    }
    Tensor::new(input_shape, dx)
}

/// Argmax bookkeeping from [`maxpool2d`] for routing gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    /// Flat input index of each output element; empty for pass-through.
    pub argmax: Vec<usize>,
    pub passthrough: bool,
}

/// Non-overlapping `k×k` max pooling on `[n,c,h,w]`.
///
/// Ragged edges are padded with `-inf`. Inputs spatially smaller than the
/// window in both dimensions pass through unchanged.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<(Tensor<T>, PoolIndices)> {
    if k == 0 {
        return Err(Error::Argument("maxpool2d: window must be >= 1".into()));
    }
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::dim("maxpool2d", shape, &[0, 0, 0, 0]));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < k && w < k {
        return Ok((
            input.clone(),
            PoolIndices {
                input_shape: shape.to_vec(),
                argmax: Vec::new(),
                passthrough: true,
            },
        ));
    }
    let oh = h.div_ceil(k);
    let ow = w.div_ceil(k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = base + oi * k * w + oj * k;
                for i in oi * k..((oi + 1) * k).min(h) {
                    for j in oj * k..((oj + 1) * k).min(w) {
                        let idx = base + i * w + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(&[n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: shape.to_vec(),
            argmax,
            passthrough: false,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(dout: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if idx.passthrough {
        return Ok(dout.clone());
    }
    if dout.len() != idx.argmax.len() {
        return Err(Error::dim(
            "maxpool2d_backward",
            dout.shape(),
            &idx.input_shape,
        ));
    }
    let mut dx = Tensor::zeros(&idx.input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dout.data().iter().zip(&idx.argmax) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Elementwise derivative of [`leaky_relu`]: 1 where `x >= 0`, else `slope`.
pub fn leaky_relu_grad<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { T::one() } else { slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let ii = (i * stride + a) as isize - pad as isize;
                                    let jj = (j * stride + bb) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w
                                    {
                                        acc += x.data()
                                            [((b * c + ci) * h + ii as usize) * w + jj as usize]
                                            * k.data()[((o * c + ci) * kh + a) * kw + bb];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_t(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = RngStream::new(9);
        let x = rand_t(&[2, 3, 5, 5], &mut rng);
        let k = rand_t(&[4, 3, 3, 3], &mut rng);
        let got = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(got.shape(), &[2, 4, 3, 3]);
        for (a, b) in got.data().iter().zip(naive_conv(&x, &k, 1, 0)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_exhaustive_shapes_match_naive() {
        let mut rng = RngStream::new(21);
        for c in 1..=4 {
            for co in [1, 3, 5] {
                for hw in [3, 4, 7] {
                    for kk in [1, 2, 3] {
                        for stride in [1, 2] {
                            for pad in [0, 1] {
                                if kk > hw + 2 * pad {
                                    continue;
                                }
                                let x = rand_t(&[3, c, hw, hw], &mut rng);
                                let k = rand_t(&[co, c, kk, kk], &mut rng);
                                let got = conv2d(&x, &k, stride, pad).unwrap();
                                let want = naive_conv(&x, &k, stride, pad);
                                for (a, b) in got.data().iter().zip(&want) {
                                    assert!((a - b).abs() <= 1e-12);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_by_one_kernel_is_channel_matmul() {
        let mut rng = RngStream::new(2);
        let x = rand_t(&[1, 3, 2, 2], &mut rng);
        let k = rand_t(&[2, 3, 1, 1], &mut rng);
        let got = conv2d(&x, &k, 1, 0).unwrap();
        for o in 0..2 {
            for p in 0..4 {
                let want: f64 = (0..3)
                    .map(|c| k.data()[o * 3 + c] * x.data()[c * 4 + p])
                    .sum();
                assert!((got.data()[o * 4 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_kernel_gives_channel_sum() {
        let mut rng = RngStream::new(4);
        let x = rand_t(&[1, 2, 4, 4], &mut rng);
        let mut k = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[9 + 4] = 1.0;
        let got = conv2d(&x, &k, 1, 1).unwrap();
        for p in 0..16 {
            let want = x.data()[p] + x.data()[16 + p];
            assert!((got.data()[p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_kernel_too_large_is_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension { .. })));
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn conv_grads_are_adjoint() {
        // <conv(x,k), d> = <x, input_grad(d)> = <k, kernel_grad(d)>
        let mut rng = RngStream::new(5);
        let x = rand_t(&[2, 3, 6, 5], &mut rng);
        let k = rand_t(&[4, 3, 3, 2], &mut rng);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        let d = rand_t(y.shape(), &mut rng);
        let lhs = y.dot(&d).unwrap();
        let dx = conv2d_input_grad(x.shape(), &k, &d, 2, 1).unwrap();
        let dk = conv2d_kernel_grad(&x, k.shape(), &d, 2, 1).unwrap();
        assert!((lhs - x.dot(&dx).unwrap()).abs() < 1e-10);
        assert!((lhs - k.dot(&dk).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn maxpool_constant_input() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4], 3.0);
        let (y, _) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_picks_max_and_index() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn maxpool_small_input_passes_through() {
        let x = Tensor::<f64>::from_f64(&[2, 3, 1, 1], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y, x);
        assert!(idx.passthrough);
        let d = Tensor::<f64>::full(&[2, 3, 1, 1], 0.5);
        assert_eq!(maxpool2d_backward(&d, &idx).unwrap(), d);
    }

    #[test]
    fn maxpool_ragged_edge_pads_with_neg_inf() {
        let x = Tensor::<f64>::from_f64(
            &[1, 1, 3, 3],
            &[-1., -2., -3., -4., -5., -6., -7., -8., -9.],
        )
        .unwrap();
        let (y, _) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[-1., -3., -7., -9.]);
    }

    #[test]
    fn maxpool_zero_window_is_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(maxpool2d(&x, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax_only() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 4], &[1., 5., 0., 0., 2., 3., 9., 1.]).unwrap();
        let (_, idx) = maxpool2d(&x, 2).unwrap();
        let d = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[10., 20.]).unwrap();
        let dx = maxpool2d_backward(&d, &idx).unwrap();
        assert_eq!(dx.data(), &[0., 10., 0., 0., 0., 0., 20., 0.]);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f64>::from_f64(&[3], &[2.0, -1.0, 0.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[2.0, -0.01, 0.0]);
        assert_eq!(leaky_relu(&x, 1.0), x);
        assert_eq!(leaky_relu_grad(&x, 0.01).data(), &[1.0, 0.01, 1.0]);
    }
}
