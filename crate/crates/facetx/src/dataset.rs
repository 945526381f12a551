//! On-disk synthetic datasets.
//!
//! A dataset directory holds `manifest.json` plus, for pair `i`, the files
//! `{i:05}.{role}.{image|semantic|mask}.ftx` for each role (`source`,
//! `target`, `gt_swap`) and a `{i:05}.json` sidecar with landmarks and
//! latents. With PNG export enabled, `{i:05}.{role}.png` views are added.

use std::fs;
use std::path::{Path, PathBuf};

use facetx_core::extractors::validate_one_hot;
use facetx_core::losses::validate_mask;
use facetx_core::synth::{pair_seed, sample_pair_sized, AttributeLatent, IdentityLatent, SwapPair, SynthSample};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const ROLES: [&str; 3] = ["source", "target", "gt_swap"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    landmarks: [[f64; 2]; 5],
    identity: IdentityLatent,
    attribute: AttributeLatent,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    source: SampleMeta,
    target: SampleMeta,
    gt_swap: SampleMeta,
}

fn meta(s: &SynthSample) -> SampleMeta {
    SampleMeta {
        landmarks: s.landmarks,
        identity: s.identity,
        attribute: s.attribute,
    }
}

fn tensor_path(dir: &Path, i: usize, role: &str, kind: &str) -> PathBuf {
    dir.join(format!("{i:05}.{role}.{kind}.ftx"))
}

/// Pair `index` of the dataset drawn from `seed`.
pub fn render_pair(seed: u64, index: usize, image_size: usize) -> Result<SwapPair> {
    Ok(sample_pair_sized(pair_seed(seed, index as u64), image_size)?)
}

/// Renders `n` pairs in memory.
pub fn render_pairs(seed: u64, n: usize, image_size: usize) -> Result<Vec<SwapPair>> {
    (0..n).map(|i| render_pair(seed, i, image_size)).collect()
}

pub fn write_pair(dir: &Path, i: usize, pair: &SwapPair, png: bool) -> Result<()> {
    for (role, s) in ROLES.iter().zip([&pair.source, &pair.target, &pair.gt_swap]) {
        io::write_tensor(&tensor_path(dir, i, role, "image"), &s.image)?;
        io::write_tensor(&tensor_path(dir, i, role, "semantic"), &s.semantic)?;
        io::write_tensor(&tensor_path(dir, i, role, "mask"), &s.mask)?;
        if png {
            io::write_png(&dir.join(format!("{i:05}.{role}.png")), &s.image)?;
        }
    }
    let side = Sidecar {
        source: meta(&pair.source),
        target: meta(&pair.target),
        gt_swap: meta(&pair.gt_swap),
    };
    let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    io::write_atomic(&dir.join(format!("{i:05}.json")), &json)
}

/// Writes `n` pairs drawn from `seed`. The manifest goes last, so a
/// directory with a manifest is complete.
pub fn write_dataset(dir: &Path, n: usize, seed: u64, image_size: usize, png: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for i in 0..n {
        write_pair(dir, i, &render_pair(seed, i, image_size)?, png)?;
    }
    let m = Manifest {
        format_version: FORMAT_VERSION,
        count: n,
        seed,
        image_size,
    };
    io::write_atomic(
        &dir.join(MANIFEST),
        &serde_json::to_vec_pretty(&m).expect("manifest serializes"),
    )?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let m: Manifest =
        serde_json::from_slice(&io::read(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: format version {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

fn read_sample(dir: &Path, i: usize, role: &str, meta: SampleMeta, size: usize) -> Result<SynthSample> {
    let image = io::read_tensor(&tensor_path(dir, i, role, "image"))?;
    let semantic = io::read_tensor(&tensor_path(dir, i, role, "semantic"))?;
    let mask = io::read_tensor(&tensor_path(dir, i, role, "mask"))?;
    let bad = |what: &str, e: String| CliError::Data(format!("pair {i} {role} {what}: {e}"));
    if image.shape() != [3, size, size] {
        return Err(bad("image", format!("shape {:?}", image.shape())));
    }
    validate_one_hot(&semantic).map_err(|e| bad("semantic", e.to_string()))?;
    if semantic.shape()[1..] != [size, size] {
        return Err(bad("semantic", format!("shape {:?}", semantic.shape())));
    }
    validate_mask(&mask, size, size).map_err(|e| bad("mask", e.to_string()))?;
    Ok(SynthSample {
        image,
        semantic,
        mask,
        landmarks: meta.landmarks,
        identity: meta.identity,
        attribute: meta.attribute,
    })
}

pub fn read_pair(dir: &Path, i: usize, size: usize) -> Result<SwapPair> {
    let path = dir.join(format!("{i:05}.json"));
    let side: Sidecar =
        serde_json::from_slice(&io::read(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(SwapPair {
        source: read_sample(dir, i, "source", side.source, size)?,
        target: read_sample(dir, i, "target", side.target, size)?,
        gt_swap: read_sample(dir, i, "gt_swap", side.gt_swap, size)?,
    })
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SwapPair>)> {
    let m = read_manifest(dir)?;
    let pairs = (0..m.count)
        .map(|i| read_pair(dir, i, m.image_size))
        .collect::<Result<_>>()?;
    Ok((m, pairs))
}
