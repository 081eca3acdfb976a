//! im2col based convolution kernels on NCHW buffers. No implicit padding.

use super::tensor::{gemm, Scalar};

/// Geometry shared by a valid convolution and its transpose.
///
/// `channels x height x width` is the "image" side, `out_h x out_w` the
/// positions at which the `kernel x kernel` window is placed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    output_padding: usize,
) -> usize {
    (input - 1) * stride + kernel + output_padding
}

pub(crate) fn im2col<T: Scalar>(image: &[T], g: &Window, col: &mut [T]) {
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let npos = g.positions();
    for ci in 0..g.channels {
        let plane = &image[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * npos..(row + 1) * npos];
                for oy in 0..g.out_h {
                    let src = &plane[(oy * s + ky) * w + kx..];
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        d.copy_from_slice(&src[..g.out_w]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src[ox * s];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns back onto the image (adjoint of [`im2col`]).
pub(crate) fn col2im_add<T: Scalar>(col: &[T], g: &Window, image: &mut [T]) {
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let npos = g.positions();
    for ci in 0..g.channels {
        let plane = &mut image[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * npos..(row + 1) * npos];
                for oy in 0..g.out_h {
                    let base = (oy * s + ky) * w + kx;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        for (d, &v) in plane[base..base + g.out_w].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            plane[base + ox * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward valid convolution. `weight` is `c_out x (c_in*k*k)` flattened.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    out: &mut [T],
) {
    let npos = g.positions();
    let mut col = vec![T::zero(); g.rows() * npos];
    for b in 0..batch {
        im2col(&input[b * g.image_len()..(b + 1) * g.image_len()], g, &mut col);
        let ob = &mut out[b * c_out * npos..(b + 1) * c_out * npos];
        gemm(false, false, c_out, npos, g.rows(), T::one(), weight, &col, T::zero(), ob);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * npos..(co + 1) * npos] {
                    *v += bv;
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    c_out: usize,
    grad_out: &[T],
    mut grads: ConvGrads<'_, T>,
) {
    let npos = g.positions();
    let mut col = vec![T::zero(); g.rows() * npos];
    let mut dcol = vec![T::zero(); g.rows() * npos];
    for b in 0..batch {
        let dy = &grad_out[b * c_out * npos..(b + 1) * c_out * npos];
        if let Some(db) = grads.bias.as_deref_mut() {
            for co in 0..c_out {
                db[co] += dy[co * npos..(co + 1) * npos].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = grads.weight.as_deref_mut() {
            im2col(&input[b * g.image_len()..(b + 1) * g.image_len()], g, &mut col);
            gemm(false, true, c_out, g.rows(), npos, T::one(), dy, &col, T::one(), dw);
        }
        if let Some(dx) = grads.input.as_deref_mut() {
            gemm(true, false, g.rows(), npos, c_out, T::one(), weight, dy, T::zero(), &mut dcol);
            col2im_add(&dcol, g, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
        }
    }
}

/// Forward transposed convolution. `g` describes the OUTPUT image (c_out
/// channels) with window positions equal to the input spatial grid.
/// `weight` is `c_in x (c_out*k*k)` flattened.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    c_in: usize,
    g: &Window,
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let npos = g.positions();
    let mut cols = vec![T::zero(); g.rows() * npos];
    let out_plane = g.height * g.width;
    for b in 0..batch {
        let xb = &input[b * c_in * npos..(b + 1) * c_in * npos];
        gemm(true, false, g.rows(), npos, c_in, T::one(), weight, xb, T::zero(), &mut cols);
        let yb = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        match bias {
            Some(bias) => {
                for (co, &bv) in bias.iter().enumerate() {
                    yb[co * out_plane..(co + 1) * out_plane].fill(bv);
                }
            }
            None => yb.fill(T::zero()),
        }
        col2im_add(&cols, g, yb);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    c_in: usize,
    g: &Window,
    weight: &[T],
    grad_out: &[T],
    mut grads: ConvGrads<'_, T>,
) {
    let npos = g.positions();
    let out_plane = g.height * g.width;
    let mut dcols = vec![T::zero(); g.rows() * npos];
    for b in 0..batch {
        let dy = &grad_out[b * g.image_len()..(b + 1) * g.image_len()];
        if let Some(db) = grads.bias.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy[co * out_plane..(co + 1) * out_plane].iter().copied().sum::<T>();
            }
        }
        if grads.weight.is_none() && grads.input.is_none() {
            continue;
        }
        im2col(dy, g, &mut dcols);
        if let Some(dx) = grads.input.as_deref_mut() {
            let dxb = &mut dx[b * c_in * npos..(b + 1) * c_in * npos];
            gemm(false, false, c_in, npos, g.rows(), T::one(), weight, &dcols, T::one(), dxb);
        }
        if let Some(dw) = grads.weight.as_deref_mut() {
            let xb = &input[b * c_in * npos..(b + 1) * c_in * npos];
            gemm(false, true, c_in, g.rows(), npos, T::one(), xb, &dcols, T::one(), dw);
        }
    }
}
