//! Raw numeric kernels over flat row-major buffers.
//!
//! GEMM is delegated to `matrixmultiply`; convolutions are lowered to GEMM
//! through an im2col buffer laid out as `[C·k·k, B·H'·W']`.

/// `C = alpha · op(A) · op(B) + beta · C` with `op(A)` of shape `m×k` and
/// `op(B)` of shape `k×n`. A transposed operand is stored in its
/// untransposed layout (`k×m` for A, `n×k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe exactly the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of a 2-D convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn columns(&self) -> usize {
        self.batch * self.out_positions()
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.columns();
    let hw_out = g.out_positions();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[b * hw_out + oy * g.out_width..][..g.out_width];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add an im2col-shaped gradient back onto the input layout.
pub fn col2im_add(cols_grad: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.columns();
    let hw_out = g.out_positions();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[b * hw_out + oy * g.out_width..][..g.out_width];
                        let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is `[B, C, H, W]`, `w` is `[C', C, k, k]`; returns `[B, C', H', W']`.
pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let ncols = g.columns();
    let mut tmp = vec![0.0; g.out_channels * ncols];
    gemm(g.out_channels, g.patch_len(), ncols, 1.0, w, false, &cols, false, 0.0, &mut tmp);
    channel_major_to_batch_major(&tmp, g.batch, g.out_channels, g.out_positions())
}

/// `[C, B·P]` to `[B, C, P]`.
pub fn channel_major_to_batch_major(src: &[f64], batch: usize, channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for c in 0..channels {
        for b in 0..batch {
            let s = &src[c * batch * positions + b * positions..][..positions];
            out[(b * channels + c) * positions..][..positions].copy_from_slice(s);
        }
    }
    out
}

/// `[B, C, P]` to `[C, B·P]`.
pub fn batch_major_to_channel_major(src: &[f64], batch: usize, channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = &src[(b * channels + c) * positions..][..positions];
            out[c * batch * positions + b * positions..][..positions].copy_from_slice(s);
        }
    }
    out
}

/// Gradients of a convolution. Either output may be skipped.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ncols = g.columns();
    let dy_cm = batch_major_to_channel_major(dy, g.batch, g.out_channels, g.out_positions());
    let dw = if want_dw {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; g.out_channels * g.patch_len()];
        gemm(g.out_channels, ncols, g.patch_len(), 1.0, &dy_cm, false, &cols, true, 0.0, &mut dw);
        Some(dw)
    } else {
        None
    };
    let dx = if want_dx {
        let mut dcols = vec![0.0; g.patch_len() * ncols];
        gemm(g.patch_len(), g.out_channels, ncols, 1.0, w, true, &dy_cm, false, 0.0, &mut dcols);
        let mut dx = vec![0.0; x.len()];
        col2im_add(&dcols, g, &mut dx);
        Some(dx)
    } else {
        None
    };
    (dx, dw)
}
