//! Binary checkpoint codec.
//!
//! Layout (integers u64 little-endian, strings length-prefixed UTF-8):
//!
//! ```text
//! "FTXCKPT1" | config text | config hash | step | group count
//! per group:  name | adam step | tensor count
//! per tensor: name | value | first moment | second moment
//! ```
//!
//! Tensors use the [`Tensor::to_bytes`] encoding. Encoding is canonical, so
//! decode followed by encode reproduces the input bytes. The output paths
//! (`checkpoint`, `metrics_log`) are stored as their defaults so that the
//! same run written to two places yields identical bytes.

use alloc::string::String;
use alloc::vec::Vec;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::FaceTransformer;
use crate::optim::AdamState;
use crate::tensor::{ByteCursor, Tensor};

pub const MAGIC: &[u8; 8] = b"FTXCKPT1";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn get_str(c: &mut ByteCursor<'_>) -> Result<String> {
    let n = c.u64()? as usize;
    let b = c.take(n)?;
    core::str::from_utf8(b)
        .map(String::from)
        .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

fn get_tensor(c: &mut ByteCursor<'_>) -> Result<Tensor> {
    let (t, used) = Tensor::read_bytes(c.rest())?;
    c.advance(used);
    Ok(t)
}

/// Serializes every parameter group (the frozen pyramid included, with zero
/// moments), the Adam state and the step counter.
pub fn encode(model: &FaceTransformer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut cfg = model.config.clone();
    let defaults = Config::default();
    cfg.checkpoint = defaults.checkpoint;
    cfg.metrics_log = defaults.metrics_log;
    put_str(&mut out, &cfg.to_text());
    put_u64(&mut out, model.config.fingerprint());
    put_u64(&mut out, model.step);
    let groups = model.groups();
    put_u64(&mut out, groups.len() as u64);
    for (gi, store) in groups.iter().enumerate() {
        let frozen;
        let state = match gi.checked_sub(1) {
            Some(i) => &model.adam[i],
            None => {
                frozen = AdamState::for_store(store);
                &frozen
            }
        };
        put_str(&mut out, store.group());
        put_u64(&mut out, state.step);
        put_u64(&mut out, store.len() as u64);
        for (((name, t), m), v) in store.names().iter().zip(store.tensors()).zip(&state.m).zip(&state.v) {
            put_str(&mut out, name);
            t.write_bytes(&mut out);
            m.write_bytes(&mut out);
            v.write_bytes(&mut out);
        }
    }
    out
}

/// Reads the config hash recorded in a checkpoint without decoding tensors.
pub fn peek_config(bytes: &[u8]) -> Result<(Config, u64)> {
    let mut c = ByteCursor::new(bytes);
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let text = get_str(&mut c)?;
    let hash = c.u64()?;
    Ok((Config::parse(&text)?, hash))
}

/// Rebuilds a model. With `expected` set, a checkpoint whose model config
/// hash differs is rejected unless `force` is true; the checkpoint's own
/// config is used either way.
pub fn decode(bytes: &[u8], expected: Option<&Config>, force: bool) -> Result<FaceTransformer> {
    let mut c = ByteCursor::new(bytes);
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let config = Config::parse(&get_str(&mut c)?)?;
    let hash = c.u64()?;
    if hash != config.fingerprint() {
        return Err(Error::Format(
            "checkpoint config hash does not match its embedded config".into(),
        ));
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != hash && !force {
            return Err(Error::ConfigMismatch {
                expected: exp.fingerprint(),
                found: hash,
            });
        }
    }
    let step = c.u64()?;
    let mut model = FaceTransformer::new(config)?;
    model.step = step;
    let ngroups = c.u64()? as usize;
    if ngroups != model.groups().len() {
        return Err(Error::Format(alloc::format!(
            "expected {} groups, found {ngroups}",
            model.groups().len()
        )));
    }
    let mut states = Vec::with_capacity(ngroups);
    for (gi, store) in model.groups_mut().into_iter().enumerate() {
        let name = get_str(&mut c)?;
        if name != store.group() {
            return Err(Error::Format(alloc::format!(
                "group {gi} is `{name}`, expected `{}`",
                store.group()
            )));
        }
        let adam_step = c.u64()?;
        let n = c.u64()? as usize;
        if n != store.len() {
            return Err(Error::Format(alloc::format!(
                "group `{name}` has {n} tensors, expected {}",
                store.len()
            )));
        }
        let (mut values, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let tname = get_str(&mut c)?;
            if tname != store.names()[i] {
                return Err(Error::Format(alloc::format!(
                    "tensor `{tname}` where `{}` was expected",
                    store.names()[i]
                )));
            }
            values.push(get_tensor(&mut c)?);
            m.push(get_tensor(&mut c)?);
            v.push(get_tensor(&mut c)?);
        }
        for (t, (mi, vi)) in values.iter().zip(m.iter().zip(&v)) {
            if mi.shape() != t.shape() || vi.shape() != t.shape() {
                return Err(Error::Format("moment shape differs from its parameter".into()));
            }
        }
        store.load_values(values)?;
        states.push(AdamState { step: adam_step, m, v });
    }
    if c.remaining() != 0 {
        return Err(Error::Format(alloc::format!(
            "{} trailing bytes after checkpoint",
            c.remaining()
        )));
    }
    states.remove(0);
    model.adam = states;
    Ok(model)
}
