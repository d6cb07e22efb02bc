//! Convolution, transposed convolution and average pooling kernels.
//!
//! Convolution is zero-padded cross-correlation. Kernels are laid out
//! `[F, C, kh, kw]` for a convolution mapping `C` to `F` channels; the
//! transposed convolution with the same kernel maps `F` back to `C` and is
//! the exact adjoint of the forward convolution.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d(input, kernel)`; output size must be exact.
    pub fn forward(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim(format!("conv2d input must be rank 4 [N,C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::dim(format!("conv2d kernel must be rank 4 [F,C,kh,kw], got {kernel:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::dim(format!(
                "axis 1 (channels): input has {c}, kernel expects {kc}"
            )));
        }
        let out_h = exact_out(h, kh, stride, pad).ok_or_else(|| {
            Error::dim(format!(
                "axis 2 (height): H={h}, kh={kh}, stride={stride}, pad={pad} do not tile exactly"
            ))
        })?;
        let out_w = exact_out(w, kw, stride, pad).ok_or_else(|| {
            Error::dim(format!(
                "axis 3 (width): W={w}, kw={kw}, stride={stride}, pad={pad} do not tile exactly"
            ))
        })?;
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: f,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Geometry of the convolution whose adjoint is `conv2d_transpose(input, kernel)`.
    pub fn transpose(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d_transpose expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d_transpose stride must be positive"));
        }
        let (n, f, oh, ow) = (input[0], input[1], input[2], input[3]);
        let (kf, c, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kf != f {
            return Err(Error::dim(format!(
                "axis 1 (channels): input has {f}, kernel expects {kf}"
            )));
        }
        let h = ((oh - 1) * stride + kh).checked_sub(2 * pad).filter(|&h| h > 0);
        let w = ((ow - 1) * stride + kw).checked_sub(2 * pad).filter(|&w| w > 0);
        let h = h.ok_or_else(|| Error::dim("axis 2 (height): transposed output would be empty"))?;
        let w = w.ok_or_else(|| Error::dim("axis 3 (width): transposed output would be empty"))?;
        let g = Self::forward(&[n, c, h, w], kernel, stride, pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (oh, ow));
        Ok(g)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    pub fn in_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }
}

fn exact_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k > padded || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = K * im2col(x[n])`
pub(crate) fn conv_forward_raw<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_plane()..(n + 1) * g.in_plane()], &mut col);
        let dst = &mut out[n * g.out_plane()..(n + 1) * g.out_plane()];
        T::gemm(
            g.out_channels,
            rows,
            cols,
            T::one(),
            kernel,
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            T::zero(),
            dst,
            (cols as isize, 1),
        );
    }
    out
}

/// Adjoint of [`conv_forward_raw`] with respect to its input:
/// `dx[n] = col2im(K^T * dy[n])`.
pub(crate) fn conv_adjoint_raw<T: Real>(g: &ConvGeometry, dy: &[T], kernel: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut dx = vec![T::zero(); g.batch * g.in_plane()];
    for n in 0..g.batch {
        T::gemm(
            rows,
            g.out_channels,
            cols,
            T::one(),
            kernel,
            (1, rows as isize),
            &dy[n * g.out_plane()..(n + 1) * g.out_plane()],
            (cols as isize, 1),
            T::zero(),
            &mut col,
            (cols as isize, 1),
        );
        col2im_add(g, &col, &mut dx[n * g.in_plane()..(n + 1) * g.in_plane()]);
    }
    dx
}

/// Kernel gradient: `dK = sum_n dy[n] * im2col(x[n])^T`.
pub(crate) fn conv_kernel_grad_raw<T: Real>(g: &ConvGeometry, x: &[T], dy: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut dk = vec![T::zero(); g.out_channels * rows];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_plane()..(n + 1) * g.in_plane()], &mut col);
        T::gemm(
            g.out_channels,
            cols,
            rows,
            T::one(),
            &dy[n * g.out_plane()..(n + 1) * g.out_plane()],
            (cols as isize, 1),
            &col,
            (1, cols as isize),
            T::one(),
            &mut dk,
            (rows as isize, 1),
        );
    }
    dk
}

/// 2-D cross-correlation of `input [N,C,H,W]` with `kernel [F,C,kh,kw]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward(input.shape(), kernel.shape(), stride, padding)?;
    let out = Tensor::from_raw(g.out_shape().to_vec(), conv_forward_raw(&g, input.data(), kernel.data()));
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Transposed convolution: `input [N,F,H',W']`, `kernel [F,C,kh,kw]` gives
/// `[N,C,H,W]` with `H = (H'-1)*stride - 2*padding + kh`.
pub fn conv2d_transpose<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::transpose(input.shape(), kernel.shape(), stride, padding)?;
    let out = Tensor::from_raw(g.in_shape().to_vec(), conv_adjoint_raw(&g, input.data(), kernel.data()));
    out.check_finite("conv2d_transpose")?;
    Ok(out)
}

/// Non-overlapping `window x window` mean pooling over `[N,C,H,W]`.
pub fn avg_pool<T: Real>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = pool_dims(input.shape(), window)?;
    let (oh, ow) = (h / window, w / window);
    let scale = T::one() / T::from_usize(window * window).unwrap();
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for i in 0..window {
                    let row = &plane[(oy * window + i) * w + ox * window..][..window];
                    s += row.iter().copied().sum::<T>();
                }
                out[(p * oh + oy) * ow + ox] = s * scale;
            }
        }
    }
    let out = Tensor::from_raw(vec![n, c, oh, ow], out);
    out.check_finite("avg_pool")?;
    Ok(out)
}

pub(crate) fn avg_pool_backward<T: Real>(in_shape: &[usize], window: usize, dy: &[T]) -> Vec<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / window, w / window);
    let scale = T::one() / T::from_usize(window * window).unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                dx[(p * h + y) * w + x] = dy[(p * oh + y / window) * ow + x / window] * scale;
            }
        }
    }
    dx
}

fn pool_dims(shape: &[usize], window: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::dim(format!("avg_pool input must be rank 4, got {shape:?}")));
    }
    if window == 0 {
        return Err(Error::dim("avg_pool window must be positive"));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % window != 0 {
        return Err(Error::dim(format!("axis 2 (height): {h} not divisible by window {window}")));
    }
    if w % window != 0 {
        return Err(Error::dim(format!("axis 3 (width): {w} not divisible by window {window}")));
    }
    Ok((shape[0], shape[1], h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    /// Nested-loop reference convolution.
    fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let [f, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for b in 0..n {
            for o in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((b * f + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, f, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = RngStream::new(3);
        let x = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
        assert_eq!(conv2d_transpose(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_kernel_and_zero_input_give_zero() {
        let mut rng = RngStream::new(4);
        let x = Tensor::<f64>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        assert!(conv2d(&x, &k, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let kt = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let z = Tensor::<f64>::zeros(&[1, 3, 5, 5]);
        assert!(conv2d_transpose(&z, &kt, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = RngStream::new(11);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let fast = conv2d(&x, &k, 1, 1).unwrap();
        let slow = conv_reference(&x, &k, 1, 1);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // strided variant
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3, 4, 4], 1.0, &mut rng);
        let fast = conv2d(&x, &k, 2, 1).unwrap();
        let slow = conv_reference(&x, &k, 2, 1);
        assert_eq!(fast.shape(), &[2, 4, 4, 4]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transpose_is_the_adjoint() {
        let mut rng = RngStream::new(21);
        for &(stride, pad, kh) in &[(1, 1, 3), (2, 1, 4), (1, 0, 3), (2, 0, 3)] {
            let h = if stride == 2 && kh == 3 && pad == 0 { 7 } else { 8 };
            let a = Tensor::<f64>::randn(&[2, 3, h, h], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[4, 3, kh, kh], 1.0, &mut rng);
            let ca = conv2d(&a, &k, stride, pad).unwrap();
            let b = Tensor::<f64>::randn(ca.shape(), 1.0, &mut rng);
            let lhs = ca.dot(&b).unwrap();
            let tb = conv2d_transpose(&b, &k, stride, pad).unwrap();
            assert_eq!(tb.shape(), a.shape());
            let rhs = a.dot(&tb).unwrap();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn inexact_tiling_names_the_axis() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 6]);
        let k = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let err = conv2d(&x, &k, 2, 0).unwrap_err().to_string();
        assert!(err.contains("axis 2"), "{err}");
        let k = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn avg_pool_basics() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool(&x, 2).unwrap().data(), &[2.5]);

        let c = Tensor::<f64>::full(&[2, 3, 4, 4], 0.75);
        assert!(avg_pool(&c, 2).unwrap().data().iter().all(|&v| v == 0.75));

        assert!(avg_pool(&Tensor::<f64>::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn avg_pool_matches_loop_oracle() {
        let mut rng = RngStream::new(5);
        let x = Tensor::<f64>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let y = avg_pool(&x, 3).unwrap();
        for p in 0..6 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            s += x.data()[p * 36 + (oy * 3 + i) * 6 + ox * 3 + j];
                        }
                    }
                    assert!((y.data()[p * 4 + oy * 2 + ox] - s / 9.0).abs() < 1e-6);
                }
            }
        }
    }
}
