//! Slice-level kernels behind the graph operations.
//!
//! Convolutions lower to im2col plus one gemm per batch item; this is the
//! only hot path in the crate, everything else is memory bound.

use std::cell::RefCell;

use crate::tensor::{gemm, Float};

thread_local! {
    static SCRATCH: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

/// Run `f` with a per-thread scratch buffer of `len` elements. Contents on
/// entry are unspecified (but initialized); callers overwrite what they read.
fn with_scratch<F: Float, R>(len: usize, f: impl FnOnce(&mut [F]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bytes = cell.borrow_mut();
        let need = len * std::mem::size_of::<F>() + std::mem::align_of::<F>();
        if bytes.len() < need {
            bytes.resize(need, 0);
        }
        // SAFETY: the buffer is initialized, large enough for `len` aligned
        // elements after the offset, and every bit pattern is a valid float.
        let (_, floats, _) = unsafe { bytes.align_to_mut::<F>() };
        f(&mut floats[..len])
    })
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Rows of the column matrix.
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output-column range `[lo, hi)` for kernel offset `kj`.
#[inline]
fn valid_range(kj: usize, pad: usize, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    // ix = ox*stride + kj - pad must lie in [0, w_in)
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if w_in + pad > kj {
        ((w_in + pad - kj - 1) / stride + 1).min(w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn im2col<F: Float>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * ho * wo);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(kj, p, s, g.w, wo);
                for oy in 0..ho {
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(F::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(F::ZERO);
                    out[hi..].fill(F::ZERO);
                    if s == 1 {
                        let start = lo + kj - p;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto an image (adjoint of [`im2col`]).
pub fn col2im_add<F: Float>(g: &ConvGeom, cols: &[F], x: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(kj, p, s, g.w, wo);
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        dst[ox * s + kj - p] += line[ox];
                    }
                }
            }
        }
    }
}

/// Batched forward convolution; `y` is overwritten.
pub fn conv2d_forward<F: Float>(g: &ConvGeom, batch: usize, x: &[F], weight: &[F], bias: Option<&[F]>, y: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * hw_out;
    let kk = g.col_rows();
    let scratch = if g.pointwise() { 0 } else { kk * hw_out };
    with_scratch(scratch, |cols: &mut [F]| {
        for n in 0..batch {
            let xn = &x[n * in_per..(n + 1) * in_per];
            let yn = &mut y[n * out_per..(n + 1) * out_per];
            let rhs: &[F] = if g.pointwise() {
                xn
            } else {
                im2col(g, xn, cols);
                cols
            };
            gemm(false, false, g.cout, hw_out, kk, F::ONE, weight, rhs, F::ZERO, yn);
            if let Some(b) = bias {
                for (co, row) in yn.chunks_mut(hw_out).enumerate() {
                    let bv = b[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    })
}

/// Batched convolution backward. Each gradient output is accumulated into
/// when present and skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Float>(
    g: &ConvGeom,
    batch: usize,
    x: &[F],
    weight: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
    mut db: Option<&mut [F]>,
) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * hw_out;
    let kk = g.col_rows();
    let scratch = if g.pointwise() { 0 } else { kk * hw_out };
    with_scratch(scratch, |cols: &mut [F]| {
        for n in 0..batch {
            let dyn_ = &dy[n * out_per..(n + 1) * out_per];
            if let Some(db) = db.as_deref_mut() {
                for (co, row) in dyn_.chunks(hw_out).enumerate() {
                    db[co] += row.iter().copied().sum::<F>();
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let xn = &x[n * in_per..(n + 1) * in_per];
                let rhs: &[F] = if g.pointwise() {
                    xn
                } else {
                    im2col(g, xn, cols);
                    cols
                };
                gemm(false, true, g.cout, kk, hw_out, F::ONE, dyn_, rhs, F::ONE, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxn = &mut dx[n * in_per..(n + 1) * in_per];
                if g.pointwise() {
                    gemm(true, false, kk, hw_out, g.cout, F::ONE, weight, dyn_, F::ONE, dxn);
                } else {
                    gemm(true, false, kk, hw_out, g.cout, F::ONE, weight, dyn_, F::ZERO, cols);
                    col2im_add(g, cols, dxn);
                }
            }
        }
    })
}

/// 2x2 stride-2 max pooling over `planes` images of `h x w`. Returns the
/// flat input index of each maximum for the backward pass.
pub fn maxpool2<F: Float>(planes: usize, h: usize, w: usize, x: &[F], y: &mut [F]) -> Vec<u32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut arg = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for &i in &[i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                y[o] = x[best];
                arg[o] = best as u32;
            }
        }
    }
    arg
}

pub fn avgpool2<F: Float>(planes: usize, h: usize, w: usize, x: &[F], y: &mut [F]) {
    let (ho, wo) = (h / 2, w / 2);
    let q = F::of(0.25);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                y[(p * ho + oy) * wo + ox] = (x[i0] + x[i0 + 1] + x[i0 + w] + x[i0 + w + 1]) * q;
            }
        }
    }
}

pub fn avgpool2_backward<F: Float>(planes: usize, h: usize, w: usize, dy: &[F], dx: &mut [F]) {
    let (ho, wo) = (h / 2, w / 2);
    let q = F::of(0.25);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(p * ho + oy) * wo + ox] * q;
                let i0 = base + 2 * oy * w + 2 * ox;
                dx[i0] += g;
                dx[i0 + 1] += g;
                dx[i0 + w] += g;
                dx[i0 + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of `planes` images of `h x w`.
pub fn upsample2<F: Float>(planes: usize, h: usize, w: usize, x: &[F], y: &mut [F]) {
    let w2 = 2 * w;
    for p in 0..planes {
        for iy in 0..h {
            let src = &x[(p * h + iy) * w..(p * h + iy + 1) * w];
            let row0 = (p * 2 * h + 2 * iy) * w2;
            for (ix, &v) in src.iter().enumerate() {
                y[row0 + 2 * ix] = v;
                y[row0 + 2 * ix + 1] = v;
            }
            let (a, b) = y.split_at_mut(row0 + w2);
            b[..w2].copy_from_slice(&a[row0..row0 + w2]);
        }
    }
}

pub fn upsample2_backward<F: Float>(planes: usize, h: usize, w: usize, dy: &[F], dx: &mut [F]) {
    let w2 = 2 * w;
    for p in 0..planes {
        for iy in 0..h {
            let r0 = (p * 2 * h + 2 * iy) * w2;
            for ix in 0..w {
                dx[(p * h + iy) * w + ix] +=
                    dy[r0 + 2 * ix] + dy[r0 + 2 * ix + 1] + dy[r0 + w2 + 2 * ix] + dy[r0 + w2 + 2 * ix + 1];
            }
        }
    }
}
