//! Feature extractors: a frozen three-level conv pyramid (used for the
//! transferred features, the background features and the perceptual /
//! contextual feature spaces) and two learnable strided extractors for the
//! face image and the semantic map.

use alloc::format;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{conv_weight, Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Three feature levels with a 1:2:4 spatial and 4:2:1 channel ratio.
/// `v1` is the coarsest (`C×H×W`), `v3` the finest (`C/4 × 4H × 4W`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub v1: T,
    pub v2: T,
    pub v3: T,
}

pub type FeaturePyramid = Pyramid<NodeId>;

impl<T> Pyramid<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Pyramid<U> {
        Pyramid {
            v1: f(self.v1),
            v2: f(self.v2),
            v3: f(self.v3),
        }
    }

    /// Levels in coarse-to-fine order.
    pub fn levels(&self) -> [&T; 3] {
        [&self.v1, &self.v2, &self.v3]
    }

    pub fn try_map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<Pyramid<U>> {
        Ok(Pyramid {
            v1: f(self.v1)?,
            v2: f(self.v2)?,
            v3: f(self.v3)?,
        })
    }
}

/// Checks the pyramid scale contract on raw shapes.
pub fn check_pyramid_shapes(v1: &[usize], v2: &[usize], v3: &[usize]) -> Result<()> {
    let ok = v1.len() == 3
        && v2.len() == 3
        && v3.len() == 3
        && v1[0].is_multiple_of(4)
        && v2[0] * 2 == v1[0]
        && v3[0] * 4 == v1[0]
        && v2[1] == 2 * v1[1]
        && v2[2] == 2 * v1[2]
        && v3[1] == 4 * v1[1]
        && v3[2] == 4 * v1[2];
    if ok {
        Ok(())
    } else {
        Err(dim_err!(
            "pyramid levels {v1:?}, {v2:?}, {v3:?} violate the 1:2:4 / 4:2:1 ratios"
        ))
    }
}

impl FeaturePyramid {
    pub fn validate(&self, g: &Graph) -> Result<()> {
        check_pyramid_shapes(g.shape(self.v1), g.shape(self.v2), g.shape(self.v3))
    }

    pub fn values(&self, g: &Graph) -> Pyramid<Tensor> {
        self.map(|id| g.value(id).clone())
    }
}

fn check_image(g: &Graph, x: NodeId, channels: usize, what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != channels {
        return Err(dim_err!("{what} must be [{channels}, H, W], got {s:?}"));
    }
    if s[1] == 0 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
        return Err(dim_err!(
            "{what} spatial extent {}×{} is not divisible by 4",
            s[1],
            s[2]
        ));
    }
    Ok(())
}

/// Stand-in for a pretrained backbone: He-uniform weights drawn once from a
/// fixed seed, no biases, never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenPyramid {
    pub store: ParamStore,
    fine: ParamId,
    mid: ParamId,
    coarse: ParamId,
}

impl FrozenPyramid {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new("pyramid", false);
        let fine = store.add("fine", conv_weight(channels / 4, 3, 3, rng));
        let mid = store.add("mid", conv_weight(channels / 2, channels / 4, 4, rng));
        let coarse = store.add("coarse", conv_weight(channels, channels / 2, 4, rng));
        Self {
            store,
            fine,
            mid,
            coarse,
        }
    }

    /// `[3, 4H, 4W]` → (`v1` C×H×W, `v2` C/2×2H×2W, `v3` C/4×4H×4W).
    pub fn extract(&self, g: &mut Graph, b: &Binding, face: NodeId) -> Result<FeaturePyramid> {
        check_image(g, face, 3, "pyramid input")?;
        let v3 = g.conv2d(face, b[self.fine], 1, 1)?;
        let v3 = g.relu(v3)?;
        let v2 = g.conv2d(v3, b[self.mid], 2, 1)?;
        let v2 = g.relu(v2)?;
        let v1 = g.conv2d(v2, b[self.coarse], 2, 1)?;
        let v1 = g.relu(v1)?;
        Ok(Pyramid { v1, v2, v3 })
    }

    /// Evaluates the pyramid on a plain tensor outside any training graph.
    pub fn extract_tensor(&self, face: &Tensor) -> Result<Pyramid<Tensor>> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, false)?;
        let x = g.constant(face.clone())?;
        let p = self.extract(&mut g, &b, x)?;
        Ok(p.values(&g))
    }
}

/// Learnable `×4` downsampling extractor: two stride-2 4×4 conv+ReLU blocks
/// followed by a 3×3 conv+ReLU, producing `[d, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvExtractor {
    pub store: ParamStore,
    in_channels: usize,
    layers: [ParamId; 3],
}

impl ConvExtractor {
    pub fn new<R: Rng + ?Sized>(group: &str, in_channels: usize, d: usize, rng: &mut R) -> Self {
        let mid = (d / 2).max(1);
        let mut store = ParamStore::new(group, true);
        let layers = [
            store.add("down1", conv_weight(mid, in_channels, 4, rng)),
            store.add("down2", conv_weight(d, mid, 4, rng)),
            store.add("refine", conv_weight(d, d, 3, rng)),
        ];
        Self {
            store,
            in_channels,
            layers,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn features(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        check_image(g, x, self.in_channels, self.store.group())?;
        let h = g.conv2d(x, b[self.layers[0]], 2, 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, b[self.layers[1]], 2, 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, b[self.layers[2]], 1, 1)?;
        g.relu(h)
    }
}

/// Rejects semantic maps that are not exactly one-hot per pixel.
pub fn validate_one_hot(sem: &Tensor) -> Result<()> {
    let s = sem.shape();
    if s.len() != 3 {
        return Err(dim_err!("semantic map must be [S, H, W], got {s:?}"));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = sem.data();
    for p in 0..hw {
        let mut total = 0.0;
        for ch in 0..c {
            let v = d[ch * hw + p];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!(
                    "semantic value {v} at pixel {p} is not 0 or 1"
                )));
            }
            total += v;
        }
        if total != 1.0 {
            return Err(Error::Validation(format!(
                "pixel {p} of the semantic map has {total} active classes"
            )));
        }
    }
    Ok(())
}

/// All extractor parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub pyramid: FrozenPyramid,
    pub image: ConvExtractor,
    pub semantic: ConvExtractor,
}

pub struct ExtractorBinding {
    pub pyramid: Binding,
    pub image: Binding,
    pub semantic: Binding,
}

impl ExtractorParams {
    /// The pyramid is drawn from `pyramid_rng` so its weights depend only on
    /// that stream.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        d: usize,
        sem_classes: usize,
        pyramid_rng: &mut R,
        rng: &mut R,
    ) -> Self {
        Self {
            pyramid: FrozenPyramid::new(channels, pyramid_rng),
            image: ConvExtractor::new("image_extractor", 3, d, rng),
            semantic: ConvExtractor::new("semantic_extractor", sem_classes, d, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph, track: bool) -> Result<ExtractorBinding> {
        Ok(ExtractorBinding {
            pyramid: g.bind(&self.pyramid.store, false)?,
            image: g.bind(&self.image.store, track)?,
            semantic: g.bind(&self.semantic.store, track)?,
        })
    }

    pub fn pyramid_extract(&self, g: &mut Graph, b: &ExtractorBinding, face: NodeId) -> Result<FeaturePyramid> {
        self.pyramid.extract(g, &b.pyramid, face)
    }

    pub fn image_features(&self, g: &mut Graph, b: &ExtractorBinding, face: NodeId) -> Result<NodeId> {
        self.image.features(g, &b.image, face)
    }

    /// The semantic map is validated as one-hot before extraction.
    pub fn semantic_features(&self, g: &mut Graph, b: &ExtractorBinding, sem: NodeId) -> Result<NodeId> {
        validate_one_hot(g.value(sem))?;
        self.semantic.features(g, &b.semantic, sem)
    }
}
