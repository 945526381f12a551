//! Raw slice kernels behind the differentiable ops. No shape checking here;
//! callers in `ops` validate extents first.

use alloc::vec;
use alloc::vec::Vec;

/// `out[m×n] (+)= a[m×k] · b[k×n]`, all row-major.
///
/// Rows of `out` are computed independently with a fixed summation order, so
/// results do not depend on how rows might be scheduled.
pub fn gemm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if !accumulate {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    if n == 0 {
        return;
    }
    let mut rows = out.chunks_exact_mut(n).enumerate();
    // Four output rows at a time share each streamed row of `b`.
    while let Some((i0, r0)) = rows.next() {
        let rest: [Option<(usize, &mut [f64])>; 3] = [rows.next(), rows.next(), rows.next()];
        match rest {
            [Some((_, r1)), Some((_, r2)), Some((_, r3))] => {
                let a0 = &a[i0 * k..(i0 + 1) * k];
                let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
                let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
                let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
                for p in 0..k {
                    let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
                    if x0 == 0.0 && x1 == 0.0 && x2 == 0.0 && x3 == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for ((((c0, c1), c2), c3), &bv) in r0
                        .iter_mut()
                        .zip(r1.iter_mut())
                        .zip(r2.iter_mut())
                        .zip(r3.iter_mut())
                        .zip(brow)
                    {
                        *c0 += x0 * bv;
                        *c1 += x1 * bv;
                        *c2 += x2 * bv;
                        *c3 += x3 * bv;
                    }
                }
            }
            rest => {
                gemm_row(r0, &a[i0 * k..(i0 + 1) * k], b, n);
                for (i, r) in rest.into_iter().flatten() {
                    gemm_row(r, &a[i * k..(i + 1) * k], b, n);
                }
            }
        }
    }
}

fn gemm_row(crow: &mut [f64], arow: &[f64], b: &[f64], n: usize) {
    for (p, &x) in arow.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (c, &bv) in crow.iter_mut().zip(brow) {
            *c += x * bv;
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `out[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, accumulate: bool) {
    let bt = transpose(b, n, k);
    gemm(out, a, &bt, m, k, n, accumulate);
}

/// `out[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, accumulate: bool) {
    let at = transpose(a, k, m);
    gemm(out, &at, b, m, k, n, accumulate);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Lays out every receptive field as a column: `[c_in·k·k, h_out·w_out]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Non-overlapping patch extraction. Row `p` is patch `p` in raster order;
/// within a row values are channel-major, then row-major inside the patch.
pub fn unfold(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (gh, gw) = (h / k, w / k);
    let row_len = c * k * k;
    let mut out = vec![0.0; gh * gw * row_len];
    for py in 0..gh {
        for px in 0..gw {
            let row = &mut out[(py * gw + px) * row_len..(py * gw + px + 1) * row_len];
            for ch in 0..c {
                for dy in 0..k {
                    let src = (ch * h + py * k + dy) * w + px * k;
                    let dst = (ch * k + dy) * k;
                    row[dst..dst + k].copy_from_slice(&x[src..src + k]);
                }
            }
        }
    }
    out
}

/// Exact inverse of [`unfold`] for the same `(c, h, w, k)`.
pub fn fold(p: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (gh, gw) = (h / k, w / k);
    let row_len = c * k * k;
    let mut out = vec![0.0; c * h * w];
    for py in 0..gh {
        for px in 0..gw {
            let row = &p[(py * gw + px) * row_len..(py * gw + px + 1) * row_len];
            for ch in 0..c {
                for dy in 0..k {
                    let dst = (ch * h + py * k + dy) * w + px * k;
                    let src = (ch * k + dy) * k;
                    out[dst..dst + k].copy_from_slice(&row[src..src + k]);
                }
            }
        }
    }
    out
}

/// Source coordinate sampling for corner-aligned bilinear resizing:
/// output index `o` reads input coordinate `o·(n_in−1)/(n_out−1)`.
/// Returns `(lower index, upper index, upper weight)` per output index.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (libm::floor(s) as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_adjoint(dy: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dy[(ch * ho + oy) * wo + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}
