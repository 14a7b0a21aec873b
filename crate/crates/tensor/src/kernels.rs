//! Raw slice kernels behind the differentiable ops.

use crate::par;

/// Rows per parallel work item in [`gemm`].
const GEMM_ROW_CHUNK: usize = 32;
/// Below this many multiply-accumulates a gemm stays on the calling thread.
const GEMM_PAR_THRESHOLD: usize = 1 << 18;

/// `c = a·b (+ c if accumulate)` with `a` logically `[m,k]` and `b` logically `[k,n]`.
///
/// `a_t`/`b_t` mean the operand is stored transposed (`[k,m]` / `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    let run = |row0: usize, c_rows: &mut [f32]| {
        let rows = c_rows.len() / n;
        // SAFETY: the row block [row0, row0+rows) of `a` is in bounds for the
        // given strides, and `c_rows` is exactly `rows × n` contiguous floats.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if par::is_parallel() && m > GEMM_ROW_CHUNK && m * k * n >= GEMM_PAR_THRESHOLD {
        par::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |i, chunk| {
            run(i * GEMM_ROW_CHUNK, chunk)
        });
    } else {
        run(0, c);
    }
}

/// Geometry of a 2-D convolution over a `[c, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution; `None` if the kernel does not fit.
    pub fn forward(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x` (`[c,h,w]`) into `[c·k·k, oh·ow]` columns; out-of-bounds taps read zero.
pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let l = g.col_len();
    let mut cols = vec![0.0; g.col_rows() * l];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c,h,w]` buffer (accumulating).
pub fn col2im(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let l = g.col_len();
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise numerically stable softmax over rows of length `n`.
pub fn softmax_rows(x: &[f32], n: usize, out: &mut [f32]) {
    for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f32;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        let inv = 1.0 / s;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row normalisation; writes `x̂` and returns the reciprocal std per row.
pub fn layer_norm_rows(x: &[f32], d: usize, xhat: &mut [f32]) -> Vec<f32> {
    let mut rstd = Vec::with_capacity(x.len() / d);
    for (xr, hr) in x.chunks(d).zip(xhat.chunks_mut(d)) {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * r;
        }
        rstd.push(r);
    }
    rstd
}
