//! 2-D convolution lowered to a matrix product by column unrolling.
//!
//! Column layout: row `c·k² + ki·k + kj`, column `n·H'·W' + oh·W' + ow`.

use alloc::vec;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Resolved sizes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < k || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input_dims: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [batch, c_in, height, width] = *input_dims else {
            return Err(Error::InvalidShape {
                dims: input_dims.to_vec(),
                reason: "convolution input must be batch x C x H x W",
            });
        };
        if k == 0 {
            return Err(crate::error::invalid("kernel size must be positive"));
        }
        let out_h = out_extent(height, k, stride, pad);
        let out_w = out_extent(width, k, stride, pad);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(Self {
                batch,
                c_in,
                height,
                width,
                k,
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(Error::InvalidShape {
                dims: input_dims.to_vec(),
                reason: "non-integral convolution output size",
            }),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input coordinate read by output `(oh, ow)` at kernel tap `(ki, kj)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oh: usize, ow: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride + ki).checked_sub(self.pad)?;
        let x = (ow * self.stride + kj).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unrolls input patches into a `(C_in·k², batch·H'·W')` matrix.
pub fn im2col(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.dims(), k, stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let hw_out = g.out_h * g.out_w;
    let x = input.data();
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let plane = &x[(n * g.c_in + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..g.out_h {
                        for ow in 0..g.out_w {
                            if let Some((y, xx)) = g.source(oh, ow, ki, kj) {
                                dst[n * hw_out + oh * g.out_w + ow] = plane[y * g.width + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    input.produce(Shape(vec![rows, cols]), out, "im2col")
}

/// Adjoint of [`im2col`]: scatters columns back onto a zero image, summing overlaps.
pub fn col2im(cols: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    if cols.dims() != [g.col_rows(), g.col_cols()] {
        return Err(Error::ShapeMismatch {
            op: "col2im",
            left: cols.dims().to_vec(),
            right: vec![g.col_rows(), g.col_cols()],
        });
    }
    let k = g.k;
    let n_cols = g.col_cols();
    let hw_out = g.out_h * g.out_w;
    let src = cols.data();
    let mut out = vec![0.0; g.batch * g.c_in * g.height * g.width];
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let col_row = &src[row * n_cols..(row + 1) * n_cols];
                for n in 0..g.batch {
                    let base = (n * g.c_in + c) * g.height * g.width;
                    for oh in 0..g.out_h {
                        for ow in 0..g.out_w {
                            if let Some((y, x)) = g.source(oh, ow, ki, kj) {
                                out[base + y * g.width + x] += col_row[n * hw_out + oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    cols.produce(
        Shape(vec![g.batch, g.c_in, g.height, g.width]),
        out,
        "col2im",
    )
}

fn kernel_size(kernel: &Tensor, c_in: usize) -> Result<(usize, usize)> {
    match *kernel.dims() {
        [c_out, kc, kh, kw] if kc == c_in && kh == kw => Ok((c_out, kh)),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d",
            left: kernel.dims().to_vec(),
            right: vec![usize::MAX, c_in, 0, 0],
        }),
    }
}

/// `(C_out, batch·H'·W')` matrix to `(batch, C_out, H', W')`.
fn fold_output(mat: &Tensor, g: &ConvGeometry, c_out: usize) -> Result<Tensor> {
    let hw = g.out_h * g.out_w;
    let m = mat.data();
    let mut out = vec![0.0; g.batch * c_out * hw];
    for co in 0..c_out {
        for n in 0..g.batch {
            let src = &m[co * g.col_cols() + n * hw..][..hw];
            out[(n * c_out + co) * hw..][..hw].copy_from_slice(src);
        }
    }
    mat.produce(Shape(vec![g.batch, c_out, g.out_h, g.out_w]), out, "conv2d")
}

/// Inverse of [`fold_output`].
fn unfold_output(out: &Tensor, g: &ConvGeometry, c_out: usize) -> Result<Tensor> {
    let hw = g.out_h * g.out_w;
    let o = out.data();
    let mut mat = vec![0.0; c_out * g.col_cols()];
    for co in 0..c_out {
        for n in 0..g.batch {
            mat[co * g.col_cols() + n * hw..][..hw].copy_from_slice(&o[(n * c_out + co) * hw..][..hw]);
        }
    }
    out.produce(Shape(vec![c_out, g.col_cols()]), mat, "conv2d_backward")
}

/// `conv2d(input, K) = fold(flatten_kernel(K) · im2col(input))`, zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let c_in = input.dims().get(1).copied().unwrap_or(0);
    let (c_out, k) = kernel_size(kernel, c_in)?;
    let g = ConvGeometry::new(input.dims(), k, stride, pad)?;
    let cols = im2col(input, k, stride, pad)?;
    let mat = kernel.flatten_kernel()?.matmul(&cols)?;
    fold_output(&mat, &g, c_out)
}

/// Vector-Jacobian product of [`conv2d`]: returns `(d_input, d_kernel)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let c_in = input.dims().get(1).copied().unwrap_or(0);
    let (c_out, k) = kernel_size(kernel, c_in)?;
    let g = ConvGeometry::new(input.dims(), k, stride, pad)?;
    if grad_out.dims() != [g.batch, c_out, g.out_h, g.out_w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: grad_out.dims().to_vec(),
            right: vec![g.batch, c_out, g.out_h, g.out_w],
        });
    }
    let cols = im2col(input, k, stride, pad)?;
    let d_out = unfold_output(grad_out, &g, c_out)?;
    let d_kernel = d_out.matmul(&cols.transpose()?)?.unflatten_kernel(kernel.dims())?;
    let d_cols = kernel.flatten_kernel()?.transpose()?.matmul(&d_out)?;
    let d_input = col2im(&d_cols, &g)?;
    Ok((d_input, d_kernel))
}
