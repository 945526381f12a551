//! Training objectives: feature consistency, adversarial, perceptual and
//! masked contextual losses, and their weighted total.

use alloc::vec::Vec;

use crate::config::ContextualSettings;
use crate::error::{dim_err, Error, Result};
use crate::extractors::FrozenPyramid;
use crate::fftm::{cosine_logits, to_tokens};
use crate::graph::{Graph, NodeId};
use crate::params::Binding;
use crate::tensor::Tensor;

/// Weights of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 10.0,
            lambda3: 0.001,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(alloc::format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Generator-side components of one step (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l_f: f64,
    pub l_adv_g: f64,
    pub l_perc: f64,
    pub l_context: f64,
}

/// Per-step losses as written to the metrics log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_f: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_perc: f64,
    pub l_context: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(c: LossComponents, l_adv_d: f64, weights: &LossWeights) -> Result<Self> {
        if !l_adv_d.is_finite() {
            return Err(Error::NonFiniteLoss { component: "l_adv_d" });
        }
        let total = total_loss(&c, weights)?;
        Ok(Self {
            l_f: c.l_f,
            l_adv_g: c.l_adv_g,
            l_adv_d,
            l_perc: c.l_perc,
            l_context: c.l_context,
            total,
        })
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_f: self.l_f,
            l_adv_g: self.l_adv_g,
            l_perc: self.l_perc,
            l_context: self.l_context,
        }
    }

    /// The six scalars in log order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.l_f,
            self.l_adv_g,
            self.l_adv_d,
            self.l_perc,
            self.l_context,
            self.total,
        ]
    }
}

fn check_finite(c: &LossComponents) -> Result<()> {
    for (component, v) in [
        ("l_f", c.l_f),
        ("l_adv_g", c.l_adv_g),
        ("l_perc", c.l_perc),
        ("l_context", c.l_context),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component });
        }
    }
    Ok(())
}

/// `λ1·l_f + λ2·l_adv_g + λ3·l_perc + λ4·l_context`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    check_finite(c)?;
    Ok(w.lambda1 * c.l_f + w.lambda2 * c.l_adv_g + w.lambda3 * c.l_perc + w.lambda4 * c.l_context)
}

/// Graph form of [`total_loss`] over scalar nodes `[l_f, l_adv_g, l_perc, l_context]`.
pub fn total_loss_node(g: &mut Graph, parts: [NodeId; 4], w: &LossWeights) -> Result<NodeId> {
    check_finite(&LossComponents {
        l_f: g.item(parts[0]),
        l_adv_g: g.item(parts[1]),
        l_perc: g.item(parts[2]),
        l_context: g.item(parts[3]),
    })?;
    let lambdas = [w.lambda1, w.lambda2, w.lambda3, w.lambda4];
    let mut acc = g.scale(parts[0], lambdas[0])?;
    for (&p, &l) in parts[1..].iter().zip(&lambdas[1..]) {
        let t = g.scale(p, l)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Mean absolute difference.
pub fn feature_loss(g: &mut Graph, q: NodeId, q_s: NodeId) -> Result<NodeId> {
    if g.shape(q) != g.shape(q_s) {
        return Err(dim_err!(
            "feature loss shapes differ: {:?} vs {:?}",
            g.shape(q),
            g.shape(q_s)
        ));
    }
    let d = g.sub(q, q_s)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `(gen, disc)` from raw logits, both through softplus:
/// `disc = mean softplus(−d_real) + mean softplus(d_fake)`,
/// `gen = mean softplus(−d_fake)`.
pub fn adversarial_losses(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<(NodeId, NodeId)> {
    let nr = g.scale(d_real, -1.0)?;
    let sr = g.softplus(nr)?;
    let real = g.mean(sr)?;
    let sf = g.softplus(d_fake)?;
    let fake = g.mean(sf)?;
    let disc = g.add(real, fake)?;
    let nf = g.scale(d_fake, -1.0)?;
    let sg = g.softplus(nf)?;
    let gen = g.mean(sg)?;
    Ok((gen, disc))
}

/// Mean L1 between the coarse (`v1`) pyramid activations of two images.
pub fn perceptual_loss(
    g: &mut Graph,
    pyr: &FrozenPyramid,
    b: &Binding,
    f_swap: NodeId,
    f_tgt: NodeId,
) -> Result<NodeId> {
    if g.shape(f_swap) != g.shape(f_tgt) {
        return Err(dim_err!(
            "perceptual loss shapes differ: {:?} vs {:?}",
            g.shape(f_swap),
            g.shape(f_tgt)
        ));
    }
    let a = pyr.extract(g, b, f_swap)?;
    let t = pyr.extract(g, b, f_tgt)?;
    feature_loss(g, a.v1, t.v1)
}

/// Contextual similarity `CX(X, Y)` of feature sets `x: [N, c]`, `y: [M, c]`.
/// Rows index `X`, columns `Y`; the result is `mean_j max_i A_ij`.
pub fn contextual_similarity(g: &mut Graph, x: NodeId, y: NodeId, bandwidth: f64, eps: f64) -> Result<NodeId> {
    let cos = cosine_logits(g, x, y)?;
    let neg = g.scale(cos, -1.0)?;
    let d = g.add_scalar(neg, 1.0)?;
    let dmin = g.row_min(d)?;
    let denom = g.add_scalar(dmin, eps)?;
    let dn = g.div_rows(d, denom)?;
    let e = g.scale(dn, -1.0 / bandwidth)?;
    let e = g.add_scalar(e, 1.0 / bandwidth)?;
    let w = g.exp(e)?;
    let rs = g.row_sum(w)?;
    let a = g.div_rows(w, rs)?;
    let best = g.col_max(a)?;
    g.mean(best)
}

/// Positions of a `side×side` feature grid whose receptive-field centre
/// (pixel `f·i + f/2`, `f = mask_side / side`) lies inside the mask.
pub fn mask_positions(mask: &Tensor, side_h: usize, side_w: usize) -> Result<Vec<usize>> {
    let s = mask.shape();
    if s.len() != 3
        || s[0] != 1
        || side_h == 0
        || side_w == 0
        || !s[1].is_multiple_of(side_h)
        || !s[2].is_multiple_of(side_w)
    {
        return Err(dim_err!("mask {s:?} cannot be sampled onto a {side_h}×{side_w} grid"));
    }
    let (fy, fx) = (s[1] / side_h, s[2] / side_w);
    let mut keep = Vec::new();
    for i in 0..side_h {
        for j in 0..side_w {
            if mask.at(&[0, fy * i + fy / 2, fx * j + fx / 2]) != 0.0 {
                keep.push(i * side_w + j);
            }
        }
    }
    Ok(keep)
}

/// Rejects masks that are not `[1, H, W]`, not binary, or empty.
pub fn validate_mask(mask: &Tensor, h: usize, w: usize) -> Result<()> {
    if mask.shape() != [1, h, w] {
        return Err(dim_err!("mask must be [1, {h}, {w}], got {:?}", mask.shape()));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("mask is not binary".into()));
    }
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Validation("mask is empty".into()));
    }
    Ok(())
}

/// `[1, H, W]` mask repeated over `c` channels.
pub fn broadcast_mask(mask: &Tensor, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(c * mask.numel());
    for _ in 0..c {
        data.extend_from_slice(mask.data());
    }
    let s = mask.shape();
    Tensor::new(&[c, s[1], s[2]], data).expect("mask length")
}

fn masked_image(g: &mut Graph, img: NodeId, mask: &Tensor) -> Result<NodeId> {
    let s = g.shape(img).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("image must be [C, H, W], got {s:?}"));
    }
    validate_mask(mask, s[1], s[2])?;
    let m = g.constant(broadcast_mask(mask, s[0]))?;
    g.mul(img, m)
}

fn level_tokens(g: &mut Graph, level: NodeId, mask: &Tensor, select: bool) -> Result<NodeId> {
    let s = g.shape(level).to_vec();
    let t = to_tokens(g, level)?;
    if !select {
        return Ok(t);
    }
    let keep = mask_positions(mask, s[1], s[2])?;
    if keep.is_empty() {
        return Err(Error::Validation(alloc::format!(
            "mask selects no positions on the {}×{} feature grid",
            s[1],
            s[2]
        )));
    }
    if keep.len() == s[1] * s[2] {
        return Ok(t);
    }
    g.select_rows(t, &keep)
}

/// `Σ_l −log CX(X_l, Y_l)` over the three pyramid levels, where `X_l`
/// comes from `f_swap·m_tgt` and `Y_l` from `f_src·m_src`. Returns the
/// total and the per-level terms (fine → coarse).
#[allow(clippy::too_many_arguments)]
pub fn contextual_loss_levels(
    g: &mut Graph,
    pyr: &FrozenPyramid,
    b: &Binding,
    f_swap: NodeId,
    f_src: NodeId,
    m_tgt: &Tensor,
    m_src: &Tensor,
    cx: &ContextualSettings,
) -> Result<(NodeId, [NodeId; 3])> {
    let xs = masked_image(g, f_swap, m_tgt)?;
    let ys = masked_image(g, f_src, m_src)?;
    let px = pyr.extract(g, b, xs)?;
    let py = pyr.extract(g, b, ys)?;
    let mut terms = [px.v3; 3];
    for (slot, (lx, ly)) in terms.iter_mut().zip([(px.v3, py.v3), (px.v2, py.v2), (px.v1, py.v1)]) {
        let x = level_tokens(g, lx, m_tgt, cx.mask_select)?;
        let y = level_tokens(g, ly, m_src, cx.mask_select)?;
        let sim = contextual_similarity(g, x, y, cx.bandwidth, cx.eps)?;
        let l = g.log(sim)?;
        *slot = g.scale(l, -1.0)?;
    }
    let a = g.add(terms[0], terms[1])?;
    Ok((g.add(a, terms[2])?, terms))
}

#[allow(clippy::too_many_arguments)]
pub fn contextual_loss(
    g: &mut Graph,
    pyr: &FrozenPyramid,
    b: &Binding,
    f_swap: NodeId,
    f_src: NodeId,
    m_tgt: &Tensor,
    m_src: &Tensor,
    cx: &ContextualSettings,
) -> Result<NodeId> {
    Ok(contextual_loss_levels(g, pyr, b, f_swap, f_src, m_tgt, m_src, cx)?.0)
}

/// Evaluates [`contextual_similarity`] on plain tensors.
pub fn contextual_similarity_tensor(x: &Tensor, y: &Tensor, bandwidth: f64, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone())?;
    let yn = g.constant(y.clone())?;
    let cx = contextual_similarity(&mut g, xn, yn, bandwidth, eps)?;
    Ok(g.item(cx))
}
