//! Tensor files, atomic writes and PNG views.

use std::fs;
use std::path::Path;

use facetx_core::Tensor;

use crate::error::{CliError, Result};

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &t.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Saves a `[3, H, W]` image in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CliError::Data(format!("PNG export needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| (((d[c * h * w + p] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| CliError::io(path, std::io::Error::other(e)))
}
