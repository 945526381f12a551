//! Run configuration and its flat `key = value` text format.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected.
//! [`Config::to_text`] writes every key in a fixed order, so the text form
//! is canonical and round-trips exactly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::Adam;

/// Model geometry. `H = W = image_size / 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub image_size: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Channels of the coarsest pyramid level (`v1`); finer levels use C/2, C/4.
    pub channels: usize,
    /// Width of the learnable image / semantic features.
    pub d: usize,
    pub heads: usize,
    pub sem_classes: usize,
    /// Generator stream widths, coarse → fine.
    pub gen_widths: [usize; 3],
    pub exchange_rounds: usize,
    pub disc_widths: Vec<usize>,
}

impl Geometry {
    pub fn tokens(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return bad(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            ));
        }
        if self.feat_h * 4 != self.image_size || self.feat_w * 4 != self.image_size {
            return bad(format!(
                "feat_h/feat_w ({}, {}) must equal image_size/4 = {}",
                self.feat_h,
                self.feat_w,
                self.image_size / 4
            ));
        }
        if self.channels < 4 || !self.channels.is_multiple_of(4) {
            return bad(format!("channels {} must be a positive multiple of 4", self.channels));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if self.sem_classes < 2 {
            return bad("sem_classes must be at least 2".into());
        }
        if self.gen_widths.contains(&0) {
            return bad("gen_widths must be positive".into());
        }
        if self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return bad("disc_widths must list at least one positive width".into());
        }
        if self.image_size >> self.disc_widths.len() == 0
            || !self.image_size.is_multiple_of(1 << self.disc_widths.len())
        {
            return bad(format!(
                "{} stride-2 discriminator layers do not fit image_size {}",
                self.disc_widths.len(),
                self.image_size
            ));
        }
        Ok(())
    }
}

/// Contextual-loss settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextualSettings {
    pub bandwidth: f64,
    pub eps: f64,
    /// Drop feature vectors whose receptive-field centre lies outside the mask.
    pub mask_select: bool,
}

impl Default for ContextualSettings {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            eps: 1e-5,
            mask_select: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub geometry: Geometry,
    pub weights: LossWeights,
    pub optimizer: Adam,
    pub contextual: ContextualSettings,
    pub batch_size: usize,
    pub steps: usize,
    pub num_pairs: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub dataset: String,
    pub checkpoint: String,
    pub metrics_log: String,
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            geometry: Geometry {
                image_size: 64,
                feat_h: 16,
                feat_w: 16,
                channels: 64,
                d: 64,
                heads: 4,
                sem_classes: 8,
                gen_widths: [32, 16, 8],
                exchange_rounds: 2,
                disc_widths: alloc::vec![16, 32, 64, 1],
            },
            weights: LossWeights::default(),
            optimizer: Adam::default(),
            contextual: ContextualSettings::default(),
            batch_size: 4,
            steps: 500,
            num_pairs: 200,
            seed: 0,
            data_seed: 1,
            dataset: String::new(),
            checkpoint: "facetx.ckpt".into(),
            metrics_log: "metrics.tsv".into(),
            checkpoint_every: 100,
            threads: 1,
        }
    }
}

/// Keys that change the model or its objective. Their canonical text is
/// hashed into checkpoints.
const MODEL_KEYS: &[&str] = &[
    "image_size",
    "feat_h",
    "feat_w",
    "channels",
    "d",
    "heads",
    "sem_classes",
    "gen_widths",
    "exchange_rounds",
    "disc_widths",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "cx_bandwidth",
    "cx_eps",
    "cx_mask_select",
    "batch_size",
];

const RUN_KEYS: &[&str] = &[
    "steps",
    "num_pairs",
    "seed",
    "data_seed",
    "dataset",
    "checkpoint",
    "metrics_log",
    "checkpoint_every",
    "threads",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// 8×8 images with narrow layers, for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            geometry: Geometry {
                image_size: 8,
                feat_h: 2,
                feat_w: 2,
                channels: 8,
                d: 4,
                heads: 2,
                sem_classes: 8,
                gen_widths: [4, 3, 2],
                exchange_rounds: 2,
                disc_widths: alloc::vec![3, 4, 1],
            },
            contextual: ContextualSettings {
                mask_select: false,
                ..ContextualSettings::default()
            },
            batch_size: 1,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.geometry;
        match key {
            "image_size" => g.image_size = parse(key, value)?,
            "feat_h" => g.feat_h = parse(key, value)?,
            "feat_w" => g.feat_w = parse(key, value)?,
            "channels" => g.channels = parse(key, value)?,
            "d" => g.d = parse(key, value)?,
            "heads" => g.heads = parse(key, value)?,
            "sem_classes" => g.sem_classes = parse(key, value)?,
            "gen_widths" => {
                let v = parse_list(key, value)?;
                g.gen_widths = v
                    .try_into()
                    .map_err(|_| Error::Format("gen_widths needs exactly three widths".into()))?;
            }
            "exchange_rounds" => g.exchange_rounds = parse(key, value)?,
            "disc_widths" => g.disc_widths = parse_list(key, value)?,
            "lambda1" => self.weights.lambda1 = parse(key, value)?,
            "lambda2" => self.weights.lambda2 = parse(key, value)?,
            "lambda3" => self.weights.lambda3 = parse(key, value)?,
            "lambda4" => self.weights.lambda4 = parse(key, value)?,
            "lr" => self.optimizer.lr = parse(key, value)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "adam_eps" => self.optimizer.eps = parse(key, value)?,
            "cx_bandwidth" => self.contextual.bandwidth = parse(key, value)?,
            "cx_eps" => self.contextual.eps = parse(key, value)?,
            "cx_mask_select" => self.contextual.mask_select = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "num_pairs" => self.num_pairs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            "metrics_log" => self.metrics_log = value.to_string(),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::Format(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.geometry;
        let s = match key {
            "image_size" => g.image_size.to_string(),
            "feat_h" => g.feat_h.to_string(),
            "feat_w" => g.feat_w.to_string(),
            "channels" => g.channels.to_string(),
            "d" => g.d.to_string(),
            "heads" => g.heads.to_string(),
            "sem_classes" => g.sem_classes.to_string(),
            "gen_widths" => join(&g.gen_widths),
            "exchange_rounds" => g.exchange_rounds.to_string(),
            "disc_widths" => join(&g.disc_widths),
            "lambda1" => self.weights.lambda1.to_string(),
            "lambda2" => self.weights.lambda2.to_string(),
            "lambda3" => self.weights.lambda3.to_string(),
            "lambda4" => self.weights.lambda4.to_string(),
            "lr" => self.optimizer.lr.to_string(),
            "beta1" => self.optimizer.beta1.to_string(),
            "beta2" => self.optimizer.beta2.to_string(),
            "adam_eps" => self.optimizer.eps.to_string(),
            "cx_bandwidth" => self.contextual.bandwidth.to_string(),
            "cx_eps" => self.contextual.eps.to_string(),
            "cx_mask_select" => self.contextual.mask_select.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "num_pairs" => self.num_pairs.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "dataset" => self.dataset.clone(),
            "checkpoint" => self.checkpoint.clone(),
            "metrics_log" => self.metrics_log.clone(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        };
        Some(s)
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        MODEL_KEYS.iter().chain(RUN_KEYS).copied()
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3, w.lambda4]
            .iter()
            .any(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(Error::Validation("loss weights must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::Validation("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::keys() {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    /// Hash of the model-defining keys; run bookkeeping (paths, step counts,
    /// seeds) is excluded so a checkpoint can be resumed with new run settings.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for k in MODEL_KEYS {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(self.get(k).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        let d = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        u64::from_le_bytes(b)
    }
}
