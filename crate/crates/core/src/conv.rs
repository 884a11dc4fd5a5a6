//! Convolution and pooling kernels (forward and backward).
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding,
//! lowered to im2col + matmul. Batch items are independent, so forward and
//! input-gradient passes run them in parallel; the kernel gradient is
//! accumulated from per-item partials in batch order so results never depend
//! on the thread schedule.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How many batch items to expand to column form at once during the kernel
/// gradient pass; bounds transient memory.
const KERNEL_GRAD_CHUNK: usize = 8;

/// Output spatial size of a convolution; errors when the kernel does not fit.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    if k == 0 {
        return Err(Error::Config("kernel size must be positive".into()));
    }
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(Error::Shape(format!(
            "kernel {k} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((
        (h + 2 * padding - k) / stride + 1,
        (w + 2 * padding - k) / stride + 1,
    ))
}

/// Expands one item `[C,H,W]` into columns `[C*K*K, OH*OW]`. `out` must be
/// zeroed by the caller.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[((ci * k + ky) * k + kx) * n..((ci * k + ky) * k + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue; // stays zero
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // ix = ox + kx - padding; copy the in-bounds span
                        let ox0 = padding.saturating_sub(kx);
                        let ox1 = ow.min(w + padding - kx);
                        if ox0 < ox1 {
                            let ix0 = ox0 + kx - padding;
                            dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed expansion: `[OH*OW, C*K*K]`, one row per output position.
#[allow(clippy::too_many_arguments)]
fn im2col_t<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let ckk = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * ckk..(oy * ow + ox + 1) * ckk];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[(ci * k + ky) * k + kx] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters columns `[C*K*K, OH*OW]` back into one item `[C,H,W]`, adding.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..((ci * k + ky) * k + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation: `[B,C,H,W] * [F,C,K,K] -> [B,F,OH,OW]`.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = x.dims4()?;
    let (f, kc, kh, kw) = kernel.dims4()?;
    if kh != kw {
        return Err(Error::Shape(format!(
            "kernel must be square, got {kh}x{kw}"
        )));
    }
    if kc != c {
        return Err(Error::Shape(format!(
            "input has {c} channels, kernel expects {kc}"
        )));
    }
    let (oh, ow) = conv_output_hw(h, w, kh, stride, padding)?;
    let n = oh * ow;
    let ckk = c * kh * kh;
    let mut y = Tensor::zeros(vec![b, f, oh, ow]);
    let xd = x.data();
    let kd = kernel.data();
    y.data_mut()
        .par_chunks_mut(f * n)
        .enumerate()
        .for_each(|(bi, yb)| {
            let mut cols = vec![S::zero(); ckk * n];
            im2col(
                &xd[bi * c * h * w..(bi + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                stride,
                padding,
                oh,
                ow,
                &mut cols,
            );
            gemm_nn(f, ckk, n, kd, &cols, yb);
        });
    Ok(y)
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<S: Scalar>(
    x_shape: &[usize],
    kernel: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = match x_shape {
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => return Err(Error::Shape(format!("expected 4-d input, got {x_shape:?}"))),
    };
    let (f, _, kh, _) = kernel.dims4()?;
    let (_, _, oh, ow) = dy.dims4()?;
    let n = oh * ow;
    let ckk = c * kh * kh;
    let mut dx = Tensor::zeros(vec![b, c, h, w]);
    let kd = kernel.data();
    let dyd = dy.data();
    dx.data_mut()
        .par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(bi, dxb)| {
            let mut dcols = vec![S::zero(); ckk * n];
            gemm_tn(
                ckk,
                f,
                n,
                kd,
                &dyd[bi * f * n..(bi + 1) * f * n],
                &mut dcols,
            );
            col2im_add(&dcols, c, h, w, kh, stride, padding, oh, ow, dxb);
        });
    Ok(dx)
}

/// Gradient of the convolution with respect to the kernel, accumulated over
/// the batch in item order.
pub fn conv2d_backward_kernel<S: Scalar>(
    x: &Tensor<S>,
    kernel_shape: &[usize],
    dy: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = x.dims4()?;
    let (f, kh) = match kernel_shape {
        [f, _, kh, _] => (*f, *kh),
        _ => {
            return Err(Error::Shape(format!(
                "expected 4-d kernel, got {kernel_shape:?}"
            )))
        }
    };
    let (_, _, oh, ow) = dy.dims4()?;
    let n = oh * ow;
    let ckk = c * kh * kh;
    let mut dk = Tensor::zeros(kernel_shape.to_vec());
    let xd = x.data();
    let dyd = dy.data();
    for chunk_start in (0..b).step_by(KERNEL_GRAD_CHUNK) {
        let chunk_end = (chunk_start + KERNEL_GRAD_CHUNK).min(b);
        let partials: Vec<Vec<S>> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|bi| {
                let mut cols_t = vec![S::zero(); n * ckk];
                im2col_t(
                    &xd[bi * c * h * w..(bi + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    stride,
                    padding,
                    oh,
                    ow,
                    &mut cols_t,
                );
                let mut partial = vec![S::zero(); f * ckk];
                gemm_nn(
                    f,
                    n,
                    ckk,
                    &dyd[bi * f * n..(bi + 1) * f * n],
                    &cols_t,
                    &mut partial,
                );
                partial
            })
            .collect();
        let acc = dk.data_mut();
        for partial in &partials {
            for (a, &p) in acc.iter_mut().zip(partial) {
                *a += p;
            }
        }
    }
    Ok(dk)
}

/// Max pooling; returns the pooled tensor and, per output element, the flat
/// index of its argmax in the input (first match in row-major scan order).
pub fn maxpool2d_forward<S: Scalar>(
    x: &Tensor<S>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::Config(
            "pool window and stride must be positive".into(),
        ));
    }
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} exceeds input {h}x{w}"
        )));
    }
    debug_assert!(x.numel() < u32::MAX as usize);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = Tensor::zeros(vec![b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let xd = x.data();
    let plane_out = oh * ow;
    y.data_mut()
        .par_chunks_mut(plane_out)
        .zip(argmax.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(pi, (yp, ap))| {
            // pi ranges over b*c planes
            let base = pi * h * w;
            let plane = &xd[base..base + h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane[oy * stride * w + ox * stride];
                    let mut best_idx = oy * stride * w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    yp[oy * ow + ox] = best;
                    ap[oy * ow + ox] = (base + best_idx) as u32;
                }
            }
        });
    Ok((y, argmax))
}

/// Routes the upstream gradient to each window's argmax position.
pub fn maxpool2d_backward<S: Scalar>(
    x_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let dxd = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dxd[idx as usize] += g;
    }
    Ok(dx)
}
