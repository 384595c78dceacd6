//! Raw numeric kernels on flat buffers.
//!
//! Every kernel computes each output element with the same sequential loop
//! no matter how the work is split across threads, so results are
//! bit-identical for any thread count.

use crate::tensor::Element;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [E])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
        return;
    }
    c.chunks_mut(n).enumerate().for_each(row);
}

pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `x.permute(axes)`: output axis `i` is input axis `axes[i]`.
pub fn permute<E: Element>(x: &[E], shape: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        // odometer increment over output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Geometry of a square-kernel 2-D convolution on one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let h = self.height + 2 * self.padding;
        let w = self.width + 2 * self.padding;
        if self.kernel > h || self.kernel > w || self.stride == 0 {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H'·W')` column matrix.
pub fn im2col<E: Element>(img: &[E], g: &ConvGeom) -> Vec<E> {
    let (oh, ow) = g.out_hw().expect("validated geometry");
    let mut col = vec![E::zero(); g.col_rows() * oh * ow];
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image.
pub fn col2im<E: Element>(col: &[E], g: &ConvGeom, img: &mut [E]) {
    let (oh, ow) = g.out_hw().expect("validated geometry");
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for align-corners=false bilinear resampling along one axis:
/// `(lo, hi, weight_of_hi)` per output coordinate.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `in_h×in_w` planes.
pub fn resize_bilinear<E: Element>(
    x: &[E],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<E> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        for &(y0, y1, wy) in &ty {
            let (wy1, wy0) = (E::lit(wy), E::lit(1.0 - wy));
            for &(x0, x1, wx) in &tx {
                let (wx1, wx0) = (E::lit(wx), E::lit(1.0 - wx));
                let top = src[y0 * in_w + x0] * wx0 + src[y0 * in_w + x1] * wx1;
                let bot = src[y1 * in_w + x0] * wx0 + src[y1 * in_w + x1] * wx1;
                out.push(top * wy0 + bot * wy1);
            }
        }
    }
    out
}

/// Transpose of [`resize_bilinear`].
pub fn resize_bilinear_adjoint<E: Element>(
    g: &[E],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<E> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut dx = vec![E::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let dst = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let (wy1, wy0) = (E::lit(wy), E::lit(1.0 - wy));
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let (wx1, wx0) = (E::lit(wx), E::lit(1.0 - wx));
                let go = src[oy * out_w + ox];
                dst[y0 * in_w + x0] += go * wy0 * wx0;
                dst[y0 * in_w + x1] += go * wy0 * wx1;
                dst[y1 * in_w + x0] += go * wy1 * wx0;
                dst[y1 * in_w + x1] += go * wy1 * wx1;
            }
        }
    }
    dx
}

/// Runs `f` over `n` independent work items, in parallel when enabled,
/// returning results in index order.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
