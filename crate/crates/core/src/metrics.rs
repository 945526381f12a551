//! Evaluation metrics: SSIM, mask distance, landmark distance and a
//! frozen-feature identity distance.

use alloc::vec::Vec;

use libm::{exp, sqrt};

use crate::error::{dim_err, Error, Result};
use crate::extractors::FrozenPyramid;
use crate::losses::{broadcast_mask, mask_positions, validate_mask};
use crate::synth::SwapPair;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalised 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering of one `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = alloc::vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions. Inputs are `[C, H, W]`
/// in `[-1, 1]`, mapped to `[0, 1]` first.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(dim_err!("ssim shapes differ: {:?} vs {:?}", s, b.shape()));
    }
    if s.len() != 3 || s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(dim_err!("ssim needs [C, H, W] with H, W ≥ {SSIM_WINDOW}, got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|v| (v + 1.0) / 2.0)
            .collect();
        let y: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|v| (v + 1.0) / 2.0)
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, h, w, &k), filter(&y, h, w, &k));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &k), filter(&yy, h, w, &k), filter(&xy, h, w, &k));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `‖m1 − m2‖₂ / √n`, in `[0, 1]` for binary masks.
pub fn shape_distance(m1: &Tensor, m2: &Tensor) -> Result<f64> {
    if m1.shape() != m2.shape() {
        return Err(dim_err!("mask shapes differ: {:?} vs {:?}", m1.shape(), m2.shape()));
    }
    if m1.numel() == 0 {
        return Err(dim_err!("empty masks"));
    }
    let ss: f64 = m1.data().iter().zip(m2.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sqrt(ss) / sqrt(m1.numel() as f64))
}

/// Mean per-point Euclidean distance in pixels.
pub fn expression_distance(l1: &[[f64; 2]], l2: &[[f64; 2]]) -> Result<f64> {
    if l1.len() != l2.len() || l1.is_empty() {
        return Err(dim_err!(
            "landmark counts {} and {} must match and be nonzero",
            l1.len(),
            l2.len()
        ));
    }
    let s: f64 = l1
        .iter()
        .zip(l2)
        .map(|(p, q)| sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1])))
        .sum();
    Ok(s / l1.len() as f64)
}

/// Mean coarse pyramid feature over the positions selected by the mask.
pub fn pooled_identity(img: &Tensor, mask: &Tensor, pyr: &FrozenPyramid) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(dim_err!("image must be [3, H, W], got {s:?}"));
    }
    validate_mask(mask, s[1], s[2])?;
    let m = broadcast_mask(mask, s[0]);
    let masked = Tensor::from_fn(s, |i| img.data()[i] * m.data()[i]);
    let v1 = pyr.extract_tensor(&masked)?.v1;
    let (c, h, w) = (v1.shape()[0], v1.shape()[1], v1.shape()[2]);
    let keep = mask_positions(mask, h, w)?;
    if keep.is_empty() {
        return Err(Error::Validation("mask selects no feature positions".into()));
    }
    let hw = h * w;
    Ok((0..c)
        .map(|ch| keep.iter().map(|&p| v1.data()[ch * hw + p]).sum::<f64>() / keep.len() as f64)
        .collect())
}

/// Euclidean distance between the mask-pooled coarse features of two faces.
pub fn id_distance(a: &Tensor, b: &Tensor, mask_a: &Tensor, mask_b: &Tensor, pyr: &FrozenPyramid) -> Result<f64> {
    let fa = pooled_identity(a, mask_a, pyr)?;
    let fb = pooled_identity(b, mask_b, pyr)?;
    Ok(sqrt(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum()))
}

/// Half-size of the template patch used by [`locate_landmarks`].
pub const LANDMARK_PATCH: usize = 3;
/// Search radius of [`locate_landmarks`] in pixels.
pub const LANDMARK_RADIUS: i64 = 4;

/// Moves each reference landmark to the best-matching offset in `img`
/// (minimum sum of squared differences of a 7×7 template cut from `reference`
/// within ±4 pixels). Zero offset wins ties.
pub fn locate_landmarks(img: &Tensor, reference: &Tensor, landmarks: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let s = img.shape();
    if s != reference.shape() || s.len() != 3 {
        return Err(dim_err!("landmark images differ: {:?} vs {:?}", s, reference.shape()));
    }
    let (c, h, w) = (s[0] as i64, s[1] as i64, s[2] as i64);
    let px = |t: &Tensor, ch: i64, y: i64, x: i64| -> f64 {
        let (y, x) = (y.clamp(0, h - 1), x.clamp(0, w - 1));
        t.data()[((ch * h + y) * w + x) as usize]
    };
    let r = LANDMARK_PATCH as i64;
    let mut out = Vec::with_capacity(landmarks.len());
    for &[lx, ly] in landmarks {
        let (cx, cy) = (libm::floor(lx) as i64, libm::floor(ly) as i64);
        let ssd = |dx: i64, dy: i64| -> f64 {
            let mut acc = 0.0;
            for ch in 0..c {
                for oy in -r..=r {
                    for ox in -r..=r {
                        let d = px(img, ch, cy + dy + oy, cx + dx + ox) - px(reference, ch, cy + oy, cx + ox);
                        acc += d * d;
                    }
                }
            }
            acc
        };
        let mut best = (ssd(0, 0), 0, 0);
        for dy in -LANDMARK_RADIUS..=LANDMARK_RADIUS {
            for dx in -LANDMARK_RADIUS..=LANDMARK_RADIUS {
                let v = ssd(dx, dy);
                if v < best.0 {
                    best = (v, dx, dy);
                }
            }
        }
        out.push([lx + best.1 as f64, ly + best.2 as f64]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalRow {
    pub id_dist: f64,
    pub expr_dist: f64,
    pub shape_dist: f64,
    pub ssim: f64,
}

/// Scores a swap output against its pair. The output inherits the target
/// mask; landmarks and SSIM are measured against the ground-truth swap and
/// the identity distance against the source face.
pub fn evaluate_output(output: &Tensor, pair: &SwapPair, pyr: &FrozenPyramid) -> Result<EvalRow> {
    let gt = &pair.gt_swap;
    let located = locate_landmarks(output, &gt.image, &gt.landmarks)?;
    Ok(EvalRow {
        id_dist: id_distance(output, &pair.source.image, &pair.target.mask, &pair.source.mask, pyr)?,
        expr_dist: expression_distance(&located, &gt.landmarks)?,
        shape_dist: shape_distance(&pair.target.mask, &gt.mask)?,
        ssim: ssim(output, &gt.image)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("cannot evaluate an empty dataset".into()));
        }
        let n = rows.len() as f64;
        let mut m = EvalRow::default();
        for r in &rows {
            m.id_dist += r.id_dist;
            m.expr_dist += r.expr_dist;
            m.shape_dist += r.shape_dist;
            m.ssim += r.ssim;
        }
        let mean = EvalRow {
            id_dist: m.id_dist / n,
            expr_dist: m.expr_dist / n,
            shape_dist: m.shape_dist / n,
            ssim: m.ssim / n,
        };
        Ok(Self { rows, mean })
    }
}
