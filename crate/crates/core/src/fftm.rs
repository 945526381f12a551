//! Face feature transformation: cosine multi-head attention that refines the
//! target (`Q`) and source (`K`) features, the correspondence matrix built
//! from the refined features, and the patch-wise transfer of the source
//! pyramid onto the target layout.
//!
//! Token matrices are `[N, d]` with `N = H·W` positions in raster order.
//! Correspondence rows index target positions and columns source positions,
//! so `C · X_src` lands source features at target positions.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::extractors::{FeaturePyramid, Pyramid};
use crate::graph::{Graph, NodeId};
use crate::params::{he_uniform, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor on row norms in cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

/// Patch sizes that bring every pyramid level to `N = H·W` rows.
pub const PATCH_SIZES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

/// Per-head query/key/value projections `[d, d/h]` and the output map `[d, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub store: ParamStore,
    heads: Vec<HeadIds>,
    w0: ParamId,
    d: usize,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(dim_err!("heads ({heads}) must divide d ({d})"));
        }
        let dh = d / heads;
        let mut store = ParamStore::new("attention", true);
        let mut ids = Vec::with_capacity(heads);
        for i in 0..heads {
            let q = store.add(&alloc::format!("head{i}.q"), he_uniform(&[d, dh], d, rng));
            let k = store.add(&alloc::format!("head{i}.k"), he_uniform(&[d, dh], d, rng));
            let v = store.add(&alloc::format!("head{i}.v"), he_uniform(&[d, dh], d, rng));
            ids.push(HeadIds { q, k, v });
        }
        let w0 = store.add("out", he_uniform(&[d, d], d, rng));
        Ok(Self {
            store,
            heads: ids,
            w0,
            d,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Overwrites one head's projections and the output map (for hand-set tests).
    pub fn set_head(&mut self, head: usize, q: Tensor, k: Tensor, v: Tensor) {
        let h = self.heads[head];
        *self.store.get_mut(h.q) = q.with_requires_grad(true);
        *self.store.get_mut(h.k) = k.with_requires_grad(true);
        *self.store.get_mut(h.v) = v.with_requires_grad(true);
    }

    pub fn set_output(&mut self, w0: Tensor) {
        *self.store.get_mut(self.w0) = w0.with_requires_grad(true);
    }

    /// Refines `features` by attending over `context`: per head,
    /// `softmax(cos(features·Wq, context·Wk)) · (context·Wv)`, heads joined
    /// and mapped by `W0`.
    pub fn refine(&self, g: &mut Graph, b: &Binding, features: NodeId, context: NodeId) -> Result<NodeId> {
        Ok(self.refine_with_weights(g, b, features, context)?.0)
    }

    /// As [`refine`](Self::refine), also returning each head's `[N, N]`
    /// attention weights.
    pub fn refine_with_weights(
        &self,
        g: &mut Graph,
        b: &Binding,
        features: NodeId,
        context: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        for x in [features, context] {
            let s = g.shape(x);
            if s.len() != 2 || s[1] != self.d {
                return Err(dim_err!("attention input must be [N, {}], got {s:?}", self.d));
            }
        }
        if g.shape(features)[0] != g.shape(context)[0] {
            return Err(dim_err!(
                "attention token counts differ: {} vs {}",
                g.shape(features)[0],
                g.shape(context)[0]
            ));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let fq = g.matmul(features, b[h.q])?;
            let ck = g.matmul(context, b[h.k])?;
            let cv = g.matmul(context, b[h.v])?;
            let logits = cosine_logits(g, fq, ck)?;
            let a = g.softmax_rows(logits)?;
            weights.push(a);
            outs.push(g.matmul(a, cv)?);
        }
        let joined = g.concat_cols(&outs)?;
        Ok((g.matmul(joined, b[self.w0])?, weights))
    }
}

/// `[N, M]` cosine similarities between the rows of `a: [N, d]` and `b: [M, d]`.
pub fn cosine_logits(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let an = g.normalize_rows(a, COSINE_EPS)?;
    let bn = g.normalize_rows(b, COSINE_EPS)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

/// `[d, H, W]` feature map → `[H·W, d]` token matrix (raster order).
pub fn to_tokens(g: &mut Graph, fmap: NodeId) -> Result<NodeId> {
    let s = g.shape(fmap).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("expected a [d, H, W] map, got {s:?}"));
    }
    let flat = g.reshape(fmap, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Row-stochastic `[N, N]` matrix; rows are target positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrespondenceMatrix(pub NodeId);

impl CorrespondenceMatrix {
    pub fn node(self) -> NodeId {
        self.0
    }
}

/// Row softmax of cosine similarities between target tokens `q_m` and source
/// tokens `k_m`.
pub fn correspondence(g: &mut Graph, q_m: NodeId, k_m: NodeId) -> Result<CorrespondenceMatrix> {
    let (qs, ks) = (g.shape(q_m), g.shape(k_m));
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(dim_err!(
            "correspondence needs [N, d] inputs of equal width, got {qs:?} and {ks:?}"
        ));
    }
    let logits = cosine_logits(g, q_m, k_m)?;
    Ok(CorrespondenceMatrix(g.softmax_rows(logits)?))
}

/// Evaluates [`correspondence`] on plain tensors.
pub fn correspondence_matrix(q_m: &Tensor, k_m: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(q_m.clone())?;
    let k = g.constant(k_m.clone())?;
    let c = correspondence(&mut g, q, k)?;
    Ok(g.value(c.0).clone())
}

/// `T_s = fold(C · unfold(V_s, k_s), k_s)` for `k = 1, 2, 4` on `v1, v2, v3`.
pub fn transform_multiscale(g: &mut Graph, c: CorrespondenceMatrix, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
    pyr.validate(g)?;
    let n = {
        let s = g.shape(pyr.v1);
        s[1] * s[2]
    };
    let cs = g.shape(c.0);
    if cs != [n, n] {
        return Err(dim_err!(
            "correspondence must be [{n}, {n}] for this pyramid, got {cs:?}"
        ));
    }
    let one = |g: &mut Graph, v: NodeId, k: usize| -> Result<NodeId> {
        let s = g.shape(v).to_vec();
        let u = g.unfold(v, k, k)?;
        let moved = g.matmul(c.0, u)?;
        g.fold(moved, k, k, s[1], s[2])
    };
    Ok(Pyramid {
        v1: one(g, pyr.v1, PATCH_SIZES[0])?,
        v2: one(g, pyr.v2, PATCH_SIZES[1])?,
        v3: one(g, pyr.v3, PATCH_SIZES[2])?,
    })
}

/// Evaluates [`transform_multiscale`] on plain tensors.
pub fn transform_tensors(c: &Tensor, pyr: &Pyramid<Tensor>) -> Result<Pyramid<Tensor>> {
    let mut g = Graph::new();
    let cn = g.constant(c.clone())?;
    let p = pyr.clone().try_map(|t| g.constant(t))?;
    let out = transform_multiscale(&mut g, CorrespondenceMatrix(cn), &p)?;
    Ok(out.values(&g))
}
