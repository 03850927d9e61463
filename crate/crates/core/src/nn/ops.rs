//! Forward kernels and their analytic adjoints.
//!
//! Feature maps are channels-last (`H×W×C`), kernels are `k×k×Cin×Cout`.
//! Every kernel iterates in a fixed order so results are bit-reproducible.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Static description of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn resolve(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (in_h, in_w, cin) = input.dims3("conv2d")?;
        let (k, k2, kcin, cout) = match kernel.shape() {
            &[a, b, c, d] => (a, b, c, d),
            other => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be k×k×Cin×Cout, got {other:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("non-square kernel {k}×{k2}"),
            ));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin} (input {in_h}×{in_w}×{cin}, kernel {k}×{k}×{kcin}×{cout})"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}×{} smaller than kernel {k}×{k}",
                    in_h + 2 * pad,
                    in_w + 2 * pad
                ),
            ));
        }
        Ok(ConvGeometry {
            in_h,
            in_w,
            cin,
            cout,
            k,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input coordinate hit by kernel offset `kk` at output coordinate `o`.
    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        if pos < 0 || pos as usize >= limit {
            None
        } else {
            Some(pos as usize)
        }
    }
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::resolve(input, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {} output channels",
                    b.shape(),
                    g.cout
                ),
            ));
        }
    }
    Ok(conv2d_with(&g, input, kernel, bias))
}

/// Patch matrix of `input`: one row per output pixel, columns ordered
/// `(ky, kx, ci)` to match the kernel layout. A 1×1 stride-1 unpadded
/// convolution uses the input buffer as is.
fn im2col<'a>(g: &ConvGeometry, x: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        return std::borrow::Cow::Borrowed(x);
    }
    let (oh, ow, cin, k) = (g.out_h(), g.out_w(), g.cin, g.k);
    let row = k * k * cin;
    let mut cols = vec![0.0; oh * ow * row];
    for oy in 0..oh {
        for ox in 0..ow {
            let r = &mut cols[(oy * ow + ox) * row..][..row];
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.in_h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.in_w) else {
                        continue;
                    };
                    r[(ky * k + kx) * cin..][..cin]
                        .copy_from_slice(&x[(iy * g.in_w + ix) * cin..][..cin]);
                }
            }
        }
    }
    std::borrow::Cow::Owned(cols)
}

/// Scatter-adds a patch-matrix gradient back onto the input grid.
fn col2im(g: &ConvGeometry, cols: &[f64], gin: &mut [f64]) {
    let (oh, ow, cin, k) = (g.out_h(), g.out_w(), g.cin, g.k);
    let row = k * k * cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let r = &cols[(oy * ow + ox) * row..][..row];
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.in_h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.in_w) else {
                        continue;
                    };
                    let dst = &mut gin[(iy * g.in_w + ix) * cin..][..cin];
                    for (d, v) in dst.iter_mut().zip(&r[(ky * k + kx) * cin..][..cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Row-major `C = alpha·op(A)·op(B) + beta·C` with `A` of logical shape
/// `m×k` and `B` of logical shape `k×n`; the transpose flags pick how the
/// stored buffers are read.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_with(
    g: &ConvGeometry,
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
) -> Tensor {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (pixels, row, cout) = (oh * ow, g.k * g.k * g.cin, g.cout);
    let cols = im2col(g, input.data());
    let mut out = vec![0.0; pixels * cout];
    if let Some(b) = bias {
        for o in out.chunks_exact_mut(cout) {
            o.copy_from_slice(b.data());
        }
    }
    gemm(
        pixels,
        row,
        cout,
        &cols,
        false,
        kernel.data(),
        false,
        1.0,
        &mut out,
    );
    Tensor::new(vec![oh, ow, cout], out).expect("conv output shape")
}

/// Adjoint of [`conv2d`]: returns `(d input, d kernel, d bias)`.
/// The input adjoint is skipped when `need_input` is false.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &Tensor,
    kernel: &Tensor,
    upstream: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (pixels, row, cout) = (oh * ow, g.k * g.k * g.cin, g.cout);
    let gout = upstream.data();

    let mut gb = vec![0.0; cout];
    for go in gout.chunks_exact(cout) {
        for (b, &v) in gb.iter_mut().zip(go) {
            *b += v;
        }
    }
    let gk = need_kernel.then(|| {
        let cols = im2col(g, input.data());
        let mut gk = vec![0.0; row * cout];
        gemm(row, pixels, cout, &cols, true, gout, false, 0.0, &mut gk);
        Tensor::new(kernel.shape().to_vec(), gk).expect("kernel grad shape")
    });
    let gin = need_input.then(|| {
        let mut gcols = vec![0.0; pixels * row];
        gemm(
            pixels,
            cout,
            row,
            gout,
            false,
            kernel.data(),
            true,
            0.0,
            &mut gcols,
        );
        let gin = if g.k == 1 && g.stride == 1 && g.pad == 0 {
            gcols
        } else {
            let mut gin = vec![0.0; input.len()];
            col2im(g, &gcols, &mut gin);
            gin
        };
        Tensor::new(input.shape().to_vec(), gin).expect("input grad shape")
    });
    (
        gin,
        gk,
        Tensor::new(vec![cout], gb).expect("bias grad shape"),
    )
}

fn finite_input(x: &Tensor, op: &str) -> Result<()> {
    x.ensure_finite(&format!("{op} input"))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    finite_input(x, "relu")?;
    Ok(x.map(|v| v.max(0.0)))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    finite_input(x, "leaky_relu")?;
    Ok(x.map(|v| if v > 0.0 { v } else { slope * v }))
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    finite_input(x, "sigmoid")?;
    Ok(x.map(sigmoid_scalar))
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    finite_input(x, "softmax")?;
    Ok(softmax_last(x))
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    finite_input(x, "log_softmax")?;
    Ok(log_softmax_last(x))
}
