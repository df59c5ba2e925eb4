//! Stride-1 convolution kernels built on im2col and GEMM.
//!
//! Weights use the `[out, in, k, k]` layout for `conv2d` and `[in, out, k, k]`
//! for `conv_transpose2d`, matching the usual deep-learning conventions.
//! Batch items are processed in parallel; per-item weight gradients are summed
//! in batch order so results do not depend on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Unfolds one `[c, h, w]` image into `[c*k*k, oh*ow]` columns, zero padded by `pad`.
fn im2col<T: Element>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    cols: &mut [T],
) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let n = oh * ow;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if pad == 0 {
                        dst.copy_from_slice(&src[kj..kj + ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox + kj) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into a zeroed `[c, h, w]` image.
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    img: &mut [T],
) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let n = oh * ow;
    img.fill(T::zero());
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if pad == 0 {
                        for (d, &s) in dst[kj..kj + ow].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox + kj) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn view<T>(s: &[T], r: usize, c: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((r, c), s).expect("gemm operand layout")
}

fn view_mut<T>(s: &mut [T], r: usize, c: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((r, c), s).expect("gemm operand layout")
}

/// Shape bookkeeping shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn oh(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn ow(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
}

pub(crate) fn conv2d_geom<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<ConvGeom> {
    let (b, c, h, w) = x.dims4()?;
    let (f, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(shape_err!(
            "conv2d: input has {} channels, weight expects {}",
            c,
            wc
        ));
    }
    if kh != kw {
        return Err(shape_err!("conv2d: non-square kernel {}x{}", kh, kw));
    }
    if bias.shape() != [f] {
        return Err(shape_err!("conv2d: bias {:?} for {} filters", bias.shape(), f));
    }
    if h + 2 * pad < kh || w + 2 * pad < kh {
        return Err(shape_err!(
            "conv2d: {}x{} input smaller than {}x{} kernel",
            h,
            w,
            kh,
            kh
        ));
    }
    Ok(ConvGeom {
        b,
        c,
        h,
        w,
        f,
        k: kh,
        pad,
    })
}

/// Cross-correlation with zero padding `pad` (0 = valid) and stride 1.
pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(x, weight, bias, pad)?;
    let (oh, ow) = (g.oh(), g.ow());
    let n = oh * ow;
    let ckk = g.c * g.k * g.k;
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.b * g.f * n];
    let wmat = view(weight.data(), g.f, ckk);
    out.par_chunks_mut(g.f * n)
        .enumerate()
        .for_each(|(bi, out_b)| {
            let mut cols = vec![T::zero(); ckk * n];
            let img = &x.data()[bi * in_stride..(bi + 1) * in_stride];
            im2col(img, g.c, g.h, g.w, g.k, g.pad, &mut cols);
            for (fi, row) in out_b.chunks_mut(n).enumerate() {
                row.fill(bias.data()[fi]);
            }
            general_mat_mul(
                T::one(),
                &wmat,
                &view(&cols, ckk, n),
                T::one(),
                &mut view_mut(out_b, g.f, n),
            );
        });
    Tensor::new(vec![g.b, g.f, oh, ow], out)
}

/// Gradients of `conv2d_forward` with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: ConvGeom,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = g.oh() * g.ow();
    let ckk = g.c * g.k * g.k;
    let in_stride = g.c * g.h * g.w;
    let wmat = view(weight.data(), g.f, ckk);
    let mut dx = vec![T::zero(); g.b * in_stride];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(in_stride)
        .enumerate()
        .map(|(bi, dx_b)| {
            let img = &x.data()[bi * in_stride..(bi + 1) * in_stride];
            let go = &grad_out.data()[bi * g.f * n..(bi + 1) * g.f * n];
            let gmat = view(go, g.f, n);
            let mut cols = vec![T::zero(); ckk * n];
            im2col(img, g.c, g.h, g.w, g.k, g.pad, &mut cols);
            let mut dw = vec![T::zero(); g.f * ckk];
            general_mat_mul(
                T::one(),
                &gmat,
                &view(&cols, ckk, n).t(),
                T::zero(),
                &mut view_mut(&mut dw, g.f, ckk),
            );
            let db = go.chunks(n).map(|r| r.iter().copied().sum()).collect();
            general_mat_mul(
                T::one(),
                &wmat.t(),
                &gmat,
                T::zero(),
                &mut view_mut(&mut cols, ckk, n),
            );
            col2im(&cols, g.c, g.h, g.w, g.k, g.pad, dx_b);
            (dw, db)
        })
        .collect();
    let (dw, db) = sum_partials(partials, g.f * ckk, g.f);
    (
        Tensor::new(vec![g.b, g.c, g.h, g.w], dx).expect("dx shape"),
        Tensor::new(weight.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![g.f], db).expect("db shape"),
    )
}

fn sum_partials<T: Element>(partials: Vec<(Vec<T>, Vec<T>)>, nw: usize, nb: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); nw];
    let mut db = vec![T::zero(); nb];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    (dw, db)
}

/// Geometry of a transposed convolution, expressed as the valid convolution it
/// is the adjoint of: `c`/`h`/`w` describe the (larger) output, `f` the input channels.
pub(crate) fn conv_transpose2d_geom<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvGeom> {
    let (b, f, h, w) = x.dims4()?;
    let (wf, c, kh, kw) = weight.dims4()?;
    if wf != f {
        return Err(shape_err!(
            "conv_transpose2d: input has {} channels, weight expects {}",
            f,
            wf
        ));
    }
    if kh != kw {
        return Err(shape_err!("conv_transpose2d: non-square kernel {}x{}", kh, kw));
    }
    if bias.shape() != [c] {
        return Err(shape_err!(
            "conv_transpose2d: bias {:?} for {} output channels",
            bias.shape(),
            c
        ));
    }
    Ok(ConvGeom {
        b,
        c,
        h: h + kh - 1,
        w: w + kh - 1,
        f,
        k: kh,
        pad: 0,
    })
}

pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geom(x, weight, bias)?;
    let n = g.oh() * g.ow();
    let ckk = g.c * g.k * g.k;
    let out_stride = g.c * g.h * g.w;
    let wmat = view(weight.data(), g.f, ckk);
    let mut out = vec![T::zero(); g.b * out_stride];
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(bi, out_b)| {
            let xb = view(&x.data()[bi * g.f * n..(bi + 1) * g.f * n], g.f, n);
            let mut cols = vec![T::zero(); ckk * n];
            general_mat_mul(
                T::one(),
                &wmat.t(),
                &xb,
                T::zero(),
                &mut view_mut(&mut cols, ckk, n),
            );
            col2im(&cols, g.c, g.h, g.w, g.k, 0, out_b);
            let plane = g.h * g.w;
            for (ci, p) in out_b.chunks_mut(plane).enumerate() {
                let bv = bias.data()[ci];
                p.iter_mut().for_each(|v| *v = *v + bv);
            }
        });
    Tensor::new(vec![g.b, g.c, g.h, g.w], out)
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: ConvGeom,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = g.oh() * g.ow();
    let ckk = g.c * g.k * g.k;
    let out_stride = g.c * g.h * g.w;
    let wmat = view(weight.data(), g.f, ckk);
    let mut dx = vec![T::zero(); g.b * g.f * n];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(g.f * n)
        .enumerate()
        .map(|(bi, dx_b)| {
            let go = &grad_out.data()[bi * out_stride..(bi + 1) * out_stride];
            let mut cols = vec![T::zero(); ckk * n];
            im2col(go, g.c, g.h, g.w, g.k, 0, &mut cols);
            let cmat = view(&cols, ckk, n);
            general_mat_mul(
                T::one(),
                &wmat,
                &cmat,
                T::zero(),
                &mut view_mut(dx_b, g.f, n),
            );
            let xb = view(&x.data()[bi * g.f * n..(bi + 1) * g.f * n], g.f, n);
            let mut dw = vec![T::zero(); g.f * ckk];
            general_mat_mul(
                T::one(),
                &xb,
                &cmat.t(),
                T::zero(),
                &mut view_mut(&mut dw, g.f, ckk),
            );
            let plane = g.h * g.w;
            let db = go.chunks(plane).map(|p| p.iter().copied().sum()).collect();
            (dw, db)
        })
        .collect();
    let (dw, db) = sum_partials(partials, g.f * ckk, g.c);
    (
        Tensor::new(vec![g.b, g.f, g.oh(), g.ow()], dx).expect("dx shape"),
        Tensor::new(weight.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![g.c], db).expect("db shape"),
    )
}
