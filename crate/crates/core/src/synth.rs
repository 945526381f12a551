//! Procedural face-like samples with exact parsing maps, inner-face masks
//! and five landmarks, driven by separate identity and attribute latents.
//!
//! Geometry lives in face-normalised coordinates `(a, b)`: the face
//! ellipse is `a² + b² ≤ 1`, `a` grows to the image right and `b` downward.
//! A pixel centre maps to `(a, b)` through the attribute's translation,
//! rotation and ellipse axes; parts are tested in that frame.

use alloc::format;
use alloc::vec::Vec;

use libm::{cos, sin};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 8;

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const EYE_L: u8 = 2;
pub const EYE_R: u8 = 3;
pub const NOSE: u8 = 4;
pub const MOUTH: u8 = 5;
pub const BROW: u8 = 6;
pub const HAIR: u8 = 7;

const HAIR_COLOR: [f64; 3] = [-0.55, -0.65, -0.75];
const EYE_COLOR: [f64; 3] = [-0.85, -0.8, -0.6];
const LIP_COLOR: [f64; 3] = [0.55, -0.45, -0.35];

const EYE_A: f64 = 0.38;
const EYE_B: f64 = -0.15;
const BROW_B: f64 = -0.4;
const NOSE_B: f64 = 0.08;
const NOSE_RY: f64 = 0.14;
const MOUTH_B: f64 = 0.5;

/// Appearance carried by the source face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatent {
    /// RGB in `[-0.6, 0.9]`.
    pub skin: [f64; 3],
    /// `[0, 1]`: 0 = round eyes, 1 = narrow and wide.
    pub eye_shape: f64,
    pub nose_width: f64,
    pub mouth_width: f64,
    pub brow_thickness: f64,
}

/// Pose, shape, expression and background carried by the target face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeLatent {
    /// Face-ellipse semi-axes as fractions of the image side:
    /// horizontal in `[0.24, 0.34]`, vertical in `[0.30, 0.40]`.
    pub axes: [f64; 2],
    /// Radians in `[-0.3, 0.3]`.
    pub rotation: f64,
    /// `[0, 1]`.
    pub mouth_open: f64,
    /// `[-1, 1]`, positive bends the mouth into a smile.
    pub mouth_curve: f64,
    /// Centre offset as fractions of the image side, each in `[-0.06, 0.06]`.
    pub translation: [f64; 2],
    /// RGB in `[-1, 1]`.
    pub background: [f64; 3],
}

fn check(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl IdentityLatent {
    pub fn validate(&self) -> Result<()> {
        for c in self.skin {
            check("skin", c, -0.6, 0.9)?;
        }
        check("eye_shape", self.eye_shape, 0.0, 1.0)?;
        check("nose_width", self.nose_width, 0.0, 1.0)?;
        check("mouth_width", self.mouth_width, 0.0, 1.0)?;
        check("brow_thickness", self.brow_thickness, 0.0, 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            skin: [
                rng.gen_range(-0.6..=0.9),
                rng.gen_range(-0.6..=0.9),
                rng.gen_range(-0.6..=0.9),
            ],
            eye_shape: rng.gen_range(0.0..=1.0),
            nose_width: rng.gen_range(0.0..=1.0),
            mouth_width: rng.gen_range(0.0..=1.0),
            brow_thickness: rng.gen_range(0.0..=1.0),
        }
    }
}

impl AttributeLatent {
    pub fn validate(&self) -> Result<()> {
        check("axes[0]", self.axes[0], 0.24, 0.34)?;
        check("axes[1]", self.axes[1], 0.30, 0.40)?;
        check("rotation", self.rotation, -0.3, 0.3)?;
        check("mouth_open", self.mouth_open, 0.0, 1.0)?;
        check("mouth_curve", self.mouth_curve, -1.0, 1.0)?;
        for t in self.translation {
            check("translation", t, -0.06, 0.06)?;
        }
        for c in self.background {
            check("background", c, -1.0, 1.0)?;
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            axes: [rng.gen_range(0.24..=0.34), rng.gen_range(0.30..=0.40)],
            rotation: rng.gen_range(-0.3..=0.3),
            mouth_open: rng.gen_range(0.0..=1.0),
            mouth_curve: rng.gen_range(-1.0..=1.0),
            translation: [rng.gen_range(-0.06..=0.06), rng.gen_range(-0.06..=0.06)],
            background: [
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            ],
        }
    }

    /// Upright, centred face with neutral expression.
    pub fn neutral(background: [f64; 3]) -> Self {
        Self {
            axes: [0.29, 0.35],
            rotation: 0.0,
            mouth_open: 0.3,
            mouth_curve: 0.0,
            translation: [0.0, 0.0],
            background,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[3, S, S]` in `[-1, 1]`.
    pub image: Tensor,
    /// One-hot `[8, S, S]`.
    pub semantic: Tensor,
    /// Binary `[1, S, S]`, set on the inner face.
    pub mask: Tensor,
    /// Pixel `(x, y)`: left eye, right eye, nose tip, left and right mouth corner.
    pub landmarks: [[f64; 2]; 5],
    pub identity: IdentityLatent,
    pub attribute: AttributeLatent,
}

impl SynthSample {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    /// Per-pixel class indices recovered from the one-hot map.
    pub fn class_map(&self) -> Vec<u8> {
        let hw = self.size() * self.size();
        let d = self.semantic.data();
        (0..hw)
            .map(|p| (0..NUM_CLASSES).find(|&c| d[c * hw + p] == 1.0).unwrap_or(0) as u8)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapPair {
    pub source: SynthSample,
    pub target: SynthSample,
    /// Source identity rendered with the target attributes.
    pub gt_swap: SynthSample,
}

/// Frame mapping between pixels and face-normalised coordinates.
struct Frame {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    rx: f64,
    ry: f64,
}

impl Frame {
    fn new(attr: &AttributeLatent, size: usize) -> Self {
        let s = size as f64;
        Self {
            cx: s / 2.0 + attr.translation[0] * s,
            cy: s / 2.0 + attr.translation[1] * s,
            cos: cos(attr.rotation),
            sin: sin(attr.rotation),
            rx: attr.axes[0] * s,
            ry: attr.axes[1] * s,
        }
    }

    fn to_face(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        (u / self.rx, v / self.ry)
    }

    fn to_pixel(&self, a: f64, b: f64) -> [f64; 2] {
        let (u, v) = (a * self.rx, b * self.ry);
        [
            self.cx + self.cos * u - self.sin * v,
            self.cy + self.sin * u + self.cos * v,
        ]
    }
}

struct Parts {
    eye_rx: f64,
    eye_ry: f64,
    brow_half: f64,
    nose_rx: f64,
    mouth_half: f64,
    mouth_open: f64,
    mouth_curve: f64,
}

impl Parts {
    fn new(id: &IdentityLatent, attr: &AttributeLatent) -> Self {
        Self {
            eye_rx: 0.12 + 0.08 * id.eye_shape,
            eye_ry: 0.11 - 0.05 * id.eye_shape,
            brow_half: 0.03 + 0.05 * id.brow_thickness,
            nose_rx: 0.06 + 0.09 * id.nose_width,
            mouth_half: 0.2 + 0.15 * id.mouth_width,
            mouth_open: attr.mouth_open,
            mouth_curve: attr.mouth_curve,
        }
    }

    fn mouth_centre(&self, a: f64) -> f64 {
        let r = a / self.mouth_half;
        MOUTH_B + 0.1 * self.mouth_curve * (1.0 - r * r)
    }

    fn classify(&self, a: f64, b: f64) -> u8 {
        let r2 = a * a + b * b;
        if r2 > 1.0 {
            let hb = b / 1.12;
            let ha = a / 1.12;
            return if ha * ha + hb * hb <= 1.0 && b < -0.3 {
                HAIR
            } else {
                BACKGROUND
            };
        }
        for (side, class) in [(-1.0, EYE_L), (1.0, EYE_R)] {
            let ea = (a - side * EYE_A) / self.eye_rx;
            let eb = (b - EYE_B) / self.eye_ry;
            if ea * ea + eb * eb <= 1.0 {
                return class;
            }
            if (a - side * EYE_A).abs() <= 0.18 && (b - BROW_B).abs() <= self.brow_half {
                return BROW;
            }
        }
        let na = a / self.nose_rx;
        let nb = (b - NOSE_B) / NOSE_RY;
        if na * na + nb * nb <= 1.0 {
            return NOSE;
        }
        if a.abs() <= self.mouth_half {
            let r = a / self.mouth_half;
            let half = 0.035 + 0.12 * self.mouth_open * (1.0 - r * r);
            if (b - self.mouth_centre(a)).abs() <= half {
                return MOUTH;
            }
        }
        SKIN
    }
}

fn clamp(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| v.clamp(-1.0, 1.0))
}

fn palette(class: u8, id: &IdentityLatent, attr: &AttributeLatent) -> [f64; 3] {
    match class {
        BACKGROUND => attr.background,
        SKIN => id.skin,
        EYE_L | EYE_R => EYE_COLOR,
        NOSE => clamp(id.skin.map(|v| 0.8 * v - 0.12)),
        MOUTH => LIP_COLOR,
        BROW => clamp(id.skin.map(|v| 0.35 * v - 0.6)),
        _ => HAIR_COLOR,
    }
}

/// Renders a 64×64 sample.
pub fn render(id: &IdentityLatent, attr: &AttributeLatent) -> Result<SynthSample> {
    render_sized(id, attr, IMAGE_SIZE)
}

/// Renders at `size×size`; `size` must be a positive multiple of 4.
pub fn render_sized(id: &IdentityLatent, attr: &AttributeLatent, size: usize) -> Result<SynthSample> {
    id.validate()?;
    attr.validate()?;
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::Validation(format!(
            "render size {size} must be a positive multiple of 4"
        )));
    }
    let frame = Frame::new(attr, size);
    let parts = Parts::new(id, attr);
    let hw = size * size;
    let mut image = alloc::vec![0.0; 3 * hw];
    let mut semantic = alloc::vec![0.0; NUM_CLASSES * hw];
    let mut mask = alloc::vec![0.0; hw];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let (a, b) = frame.to_face(x as f64 + 0.5, y as f64 + 0.5);
            let class = parts.classify(a, b);
            let rgb = palette(class, id, attr);
            for c in 0..3 {
                image[c * hw + p] = rgb[c];
            }
            semantic[class as usize * hw + p] = 1.0;
            if class != BACKGROUND && class != HAIR {
                mask[p] = 1.0;
            }
        }
    }
    let landmarks = [
        frame.to_pixel(-EYE_A, EYE_B),
        frame.to_pixel(EYE_A, EYE_B),
        frame.to_pixel(0.0, NOSE_B + 0.8 * NOSE_RY),
        frame.to_pixel(-parts.mouth_half, parts.mouth_centre(parts.mouth_half)),
        frame.to_pixel(parts.mouth_half, parts.mouth_centre(parts.mouth_half)),
    ];
    Ok(SynthSample {
        image: Tensor::new(&[3, size, size], image)?,
        semantic: Tensor::new(&[NUM_CLASSES, size, size], semantic)?,
        mask: Tensor::new(&[1, size, size], mask)?,
        landmarks,
        identity: *id,
        attribute: *attr,
    })
}

/// Independent source/target draws plus the crossed ground truth.
pub fn sample_pair(seed: u64) -> SwapPair {
    sample_pair_sized(seed, IMAGE_SIZE).expect("sampled latents are in range")
}

pub fn sample_pair_sized(seed: u64, size: usize) -> Result<SwapPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_s = IdentityLatent::sample(&mut rng);
    let attr_s = AttributeLatent::sample(&mut rng);
    let id_t = IdentityLatent::sample(&mut rng);
    let attr_t = AttributeLatent::sample(&mut rng);
    Ok(SwapPair {
        source: render_sized(&id_s, &attr_s, size)?,
        target: render_sized(&id_t, &attr_t, size)?,
        gt_swap: render_sized(&id_s, &attr_t, size)?,
    })
}

/// Seed of pair `index` in a dataset drawn from `seed` (SplitMix64 finaliser).
pub fn pair_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
