//! Face generation: three scale streams fed by the transferred features,
//! the background features and the semantic features, with repeated
//! pair-wise exchange between adjacent scales, then a conv+tanh head.
//! Also the patch discriminator used by the adversarial objective.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::Geometry;
use crate::error::{dim_err, Result};
use crate::extractors::FeaturePyramid;
use crate::graph::{Graph, NodeId};
use crate::params::{conv_weight, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weights of one coarse↔fine exchange.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExchangeIds {
    /// 3×3 conv on the upsampled coarse stream (`c_lo → c_lo`).
    pub up_conv: ParamId,
    /// 1×1 adapter into the fine stream (`c_lo → c_hi`).
    pub up_adapter: ParamId,
    /// Stride-2 4×4 conv on the fine stream (`c_hi → c_hi`).
    pub down_conv: ParamId,
    /// 1×1 adapter into the coarse stream (`c_hi → c_lo`).
    pub down_adapter: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ResIds {
    a: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub store: ParamStore,
    widths: [usize; 3],
    inputs: [ParamId; 3],
    residual: [ResIds; 3],
    /// `exchanges[round][pair]`, pair 0 = coarse↔mid, pair 1 = mid↔fine.
    exchanges: Vec<[ExchangeIds; 2]>,
    head: ParamId,
}

impl GeneratorParams {
    pub fn new<R: Rng + ?Sized>(geo: &Geometry, rng: &mut R) -> Self {
        let [g1, g2, g3] = geo.gen_widths;
        let (c, d) = (geo.channels, geo.d);
        let mut store = ParamStore::new("generator", true);
        let inputs = [
            store.add("in.coarse", conv_weight(g1, 2 * c + d, 1, rng)),
            store.add("in.mid", conv_weight(g2, c, 1, rng)),
            store.add("in.fine", conv_weight(g3, c / 2, 1, rng)),
        ];
        let names = ["coarse", "mid", "fine"];
        let residual = core::array::from_fn(|i| {
            let w = geo.gen_widths[i];
            ResIds {
                a: store.add(&alloc::format!("res.{}.a", names[i]), conv_weight(w, w, 3, rng)),
                b: store.add(&alloc::format!("res.{}.b", names[i]), conv_weight(w, w, 3, rng)),
            }
        });
        let mut exchanges = Vec::with_capacity(geo.exchange_rounds);
        for r in 0..geo.exchange_rounds {
            let pair = |store: &mut ParamStore, p: usize, hi: usize, lo: usize, rng: &mut R| ExchangeIds {
                up_conv: store.add(&alloc::format!("x{r}.{p}.up_conv"), conv_weight(lo, lo, 3, rng)),
                up_adapter: store.add(&alloc::format!("x{r}.{p}.up_adapter"), conv_weight(hi, lo, 1, rng)),
                down_conv: store.add(&alloc::format!("x{r}.{p}.down_conv"), conv_weight(hi, hi, 4, rng)),
                down_adapter: store.add(&alloc::format!("x{r}.{p}.down_adapter"), conv_weight(lo, hi, 1, rng)),
            };
            let p0 = pair(&mut store, 0, g2, g1, rng);
            let p1 = pair(&mut store, 1, g3, g2, rng);
            exchanges.push([p0, p1]);
        }
        let head = store.add("head", conv_weight(3, g3, 3, rng));
        Self {
            store,
            widths: geo.gen_widths,
            inputs,
            residual,
            exchanges,
            head,
        }
    }

    pub fn exchange_ids(&self) -> &[[ExchangeIds; 2]] {
        &self.exchanges
    }

    /// Zeroes every exchange adapter so the three streams stop interacting.
    pub fn zero_adapters(&mut self) {
        for round in self.exchanges.clone() {
            for x in round {
                for id in [x.up_adapter, x.down_adapter] {
                    self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    fn residual_block(&self, g: &mut Graph, b: &Binding, ids: ResIds, x: NodeId) -> Result<NodeId> {
        let h = g.conv2d(x, b[ids.a], 1, 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, b[ids.b], 1, 1)?;
        g.add(x, h)
    }

    /// Generates a `[3, 4H, 4W]` image in `[−1, 1]` from the semantic
    /// features `s: [d, H, W]`, transferred features `t` and background
    /// features `bg`.
    pub fn generate(
        &self,
        g: &mut Graph,
        b: &Binding,
        s: NodeId,
        t: &FeaturePyramid,
        bg: &FeaturePyramid,
    ) -> Result<NodeId> {
        t.validate(g)?;
        bg.validate(g)?;
        for (tl, bl) in t.levels().iter().zip(bg.levels()) {
            if g.shape(**tl) != g.shape(*bl) {
                return Err(dim_err!(
                    "transferred {:?} and background {:?} features differ",
                    g.shape(**tl),
                    g.shape(*bl)
                ));
            }
        }
        let ss = g.shape(s);
        let v1s = g.shape(t.v1);
        if ss.len() != 3 || ss[1..] != v1s[1..] {
            return Err(dim_err!(
                "semantic features {ss:?} must match coarse level {v1s:?} spatially"
            ));
        }
        let coarse_in = g.concat_channels(&[t.v1, bg.v1, s])?;
        let mid_in = g.concat_channels(&[t.v2, bg.v2])?;
        let fine_in = g.concat_channels(&[t.v3, bg.v3])?;
        let mut streams = [coarse_in, mid_in, fine_in];
        for (i, x) in streams.iter_mut().enumerate() {
            let h = g.conv2d(*x, b[self.inputs[i]], 1, 0)?;
            let h = g.relu(h)?;
            *x = self.residual_block(g, b, self.residual[i], h)?;
        }
        for round in &self.exchanges {
            let (mid, coarse) = exchange_pair(g, b, &round[0], streams[1], streams[0])?;
            streams[0] = coarse;
            let (fine, mid) = exchange_pair(g, b, &round[1], streams[2], mid)?;
            streams[1] = mid;
            streams[2] = fine;
        }
        let out = g.conv2d(streams[2], b[self.head], 1, 1)?;
        g.tanh(out)
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }
}

/// One exchange between a fine stream `hi: [c_hi, 2s, 2s]` and a coarse
/// stream `lo: [c_lo, s, s]`:
///
/// ```text
/// hi' = hi + A_up · relu(conv3(upsample(lo)))
/// lo' = lo + A_down · relu(conv4_s2(hi))
/// ```
pub fn exchange_pair(
    g: &mut Graph,
    b: &Binding,
    ids: &ExchangeIds,
    hi: NodeId,
    lo: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (hs, ls) = (g.shape(hi).to_vec(), g.shape(lo).to_vec());
    if hs.len() != 3 || ls.len() != 3 || hs[1] != 2 * ls[1] || hs[2] != 2 * ls[2] {
        return Err(dim_err!(
            "exchange needs an exact 2× spatial ratio, got {hs:?} and {ls:?}"
        ));
    }
    let up = g.upsample(lo, 2)?;
    let up = g.conv2d(up, b[ids.up_conv], 1, 1)?;
    let up = g.relu(up)?;
    let up = g.conv2d(up, b[ids.up_adapter], 1, 0)?;
    let hi_new = g.add(hi, up)?;

    let down = g.conv2d(hi, b[ids.down_conv], 2, 1)?;
    let down = g.relu(down)?;
    let down = g.conv2d(down, b[ids.down_adapter], 1, 0)?;
    let lo_new = g.add(lo, down)?;
    Ok((hi_new, lo_new))
}

/// Stack of stride-2 4×4 convs (ReLU between layers) emitting raw patch logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub store: ParamStore,
    layers: Vec<ParamId>,
}

impl DiscriminatorParams {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut store = ParamStore::new("discriminator", true);
        let mut c_in = 3;
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            layers.push(store.add(&alloc::format!("conv{i}"), conv_weight(w, c_in, 4, rng)));
            c_in = w;
        }
        Self { store, layers }
    }

    pub fn discriminate(&self, g: &mut Graph, b: &Binding, img: NodeId) -> Result<NodeId> {
        let mut h = img;
        for (i, &id) in self.layers.iter().enumerate() {
            h = g.conv2d(h, b[id], 2, 1)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn discriminate_tensor(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, false)?;
        let x = g.constant(img.clone())?;
        let y = self.discriminate(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }
}
