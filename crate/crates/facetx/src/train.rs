//! Training driver: batches, metrics log, checkpoints, NaN abort, resume.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use facetx_core::checkpoint;
use facetx_core::losses::LossReport;
use facetx_core::model::{batch_indices, FaceTransformer};
use facetx_core::synth::SwapPair;
use facetx_core::{Config, Error as CoreError};

use crate::dataset::{read_dataset, render_pairs};
use crate::error::{CliError, Result};
use crate::io;

/// One metrics-log line: completed step, then the six loss scalars.
pub fn metrics_line(step: u64, r: &LossReport) -> String {
    let mut s = step.to_string();
    for v in r.values() {
        let _ = write!(s, "\t{v}");
    }
    s.push('\n');
    s
}

/// Training pairs: the configured dataset directory, or `num_pairs` pairs
/// rendered from `data_seed` when no dataset is set.
pub fn load_pairs(config: &Config) -> Result<Vec<SwapPair>> {
    let size = config.geometry.image_size;
    let pairs = if config.dataset.is_empty() {
        render_pairs(config.data_seed, config.num_pairs, size)?
    } else {
        let (m, pairs) = read_dataset(Path::new(&config.dataset))?;
        if m.image_size != size {
            return Err(CliError::Data(format!(
                "dataset images are {}×{0}, config expects {size}×{size}",
                m.image_size
            )));
        }
        pairs
    };
    if pairs.is_empty() {
        return Err(CliError::Data("no training pairs".into()));
    }
    Ok(pairs)
}

pub fn save_checkpoint(path: &Path, model: &FaceTransformer) -> Result<()> {
    io::write_atomic(path, &checkpoint::encode(model))
}

pub fn load_checkpoint(path: &Path, expected: Option<&Config>, force: bool) -> Result<FaceTransformer> {
    let bytes = io::read(path)?;
    checkpoint::decode(&bytes, expected, force).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub first_step: u64,
    pub final_step: u64,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub reports: Vec<LossReport>,
}

/// Trains until `config.steps` steps are complete. With `resume`, the model
/// and optimizer state come from `config.checkpoint` and the metrics log is
/// cut back to the checkpoint's step before appending.
pub fn train(config: &Config, resume: bool) -> Result<TrainOutcome> {
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let ckpt = PathBuf::from(&config.checkpoint);
    let log_path = PathBuf::from(&config.metrics_log);
    let mut model = if resume {
        let mut m = load_checkpoint(&ckpt, Some(config), false)?;
        m.config = config.clone();
        m
    } else {
        FaceTransformer::new(config.clone()).map_err(|e| CliError::Config(e.to_string()))?
    };
    let pairs = load_pairs(config)?;

    let mut log_text = String::new();
    if resume {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().take(model.step as usize) {
                log_text.push_str(line);
                log_text.push('\n');
            }
        }
    }
    io::write_atomic(&log_path, log_text.as_bytes())?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;

    let first_step = model.step;
    let mut reports = Vec::new();
    let mut saved_at = None;
    while model.step < config.steps as u64 {
        let idx = batch_indices(config.seed, model.step, pairs.len(), config.batch_size);
        let batch: Vec<&SwapPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let report = match model.train_step(&batch) {
            Ok(r) => r,
            Err(source @ (CoreError::NonFinite { .. } | CoreError::NonFiniteLoss { .. })) => {
                save_checkpoint(&ckpt, &model)?;
                return Err(CliError::NanAbort {
                    step: model.step + 1,
                    checkpoint: ckpt,
                    source,
                });
            }
            Err(e) => return Err(e.into()),
        };
        log.write_all(metrics_line(model.step, &report).as_bytes())
            .map_err(|e| CliError::io(&log_path, e))?;
        reports.push(report);
        if config.checkpoint_every > 0 && model.step % config.checkpoint_every as u64 == 0 {
            save_checkpoint(&ckpt, &model)?;
            saved_at = Some(model.step);
        }
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    if saved_at != Some(model.step) {
        save_checkpoint(&ckpt, &model)?;
    }
    Ok(TrainOutcome {
        first_step,
        final_step: model.step,
        checkpoint: ckpt,
        metrics_log: log_path,
        reports,
    })
}
