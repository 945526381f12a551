//! `swap`, `eval`, `gradcheck` and `gen-data`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use facetx_core::graph::BackwardFault;
use facetx_core::metrics::{evaluate_output, EvalReport, EvalRow};
use facetx_core::model::{FaceTransformer, GroupCheck};
use facetx_core::synth::{render_sized, sample_pair_sized, SwapPair};
use facetx_core::Config;
use serde::Serialize;

use crate::dataset::{read_dataset, write_dataset, Manifest};
use crate::error::{CliError, Result};
use crate::io;
use crate::train::{load_checkpoint, load_pairs};

pub const EVAL_HEADER: &str = "pair\tid_dist\texpr_dist\tshape_dist\tssim\n";

fn row_line(label: &str, r: &EvalRow) -> String {
    format!(
        "{label}\t{}\t{}\t{}\t{}\n",
        r.id_dist, r.expr_dist, r.shape_dist, r.ssim
    )
}

/// Pair built from the source face of pair `source` and the target face of
/// pair `target`, with a freshly rendered ground truth.
pub fn cross_pair(pairs: &[SwapPair], source: usize, target: usize) -> Result<SwapPair> {
    let n = pairs.len();
    if source >= n || target >= n {
        return Err(CliError::Data(format!("pair index out of range (have {n} pairs)")));
    }
    let src = pairs[source].source.clone();
    let tgt = pairs[target].target.clone();
    let gt_swap = render_sized(&src.identity, &tgt.attribute, tgt.size())?;
    Ok(SwapPair {
        source: src,
        target: tgt,
        gt_swap,
    })
}

#[derive(Debug)]
pub struct SwapOutcome {
    pub image: facetx_core::Tensor,
    pub row: EvalRow,
}

/// Swaps one pair and writes `swap.ftx`, `swap.png` and `swap.tsv` into `out`.
pub fn swap(ckpt: &Path, data: Option<&Path>, source: usize, target: usize, out: &Path) -> Result<SwapOutcome> {
    let model = load_checkpoint(ckpt, None, false)?;
    let pairs = match data {
        Some(d) => read_dataset(d)?.1,
        None => load_pairs(&model.config)?,
    };
    let pair = cross_pair(&pairs, source, target)?;
    let image = model.swap(&pair.source, &pair.target)?;
    let row = evaluate_output(&image, &pair, &model.extractors.pyramid)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    io::write_tensor(&out.join("swap.ftx"), &image)?;
    io::write_png(&out.join("swap.png"), &image)?;
    let mut tsv = String::from(EVAL_HEADER);
    tsv.push_str(&row_line(&format!("{source}->{target}"), &row));
    io::write_atomic(&out.join("swap.tsv"), tsv.as_bytes())?;
    Ok(SwapOutcome { image, row })
}

/// Swaps and scores every pair, splitting the pairs over `threads` workers.
/// Rows come back in pair order whatever the thread count.
pub fn evaluate_pairs(model: &FaceTransformer, pairs: &[SwapPair], threads: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(CliError::Data("cannot evaluate an empty dataset".into()));
    }
    let score = |p: &SwapPair| -> Result<EvalRow> {
        let out = model.swap(&p.source, &p.target)?;
        Ok(evaluate_output(&out, p, &model.extractors.pyramid)?)
    };
    let threads = threads.clamp(1, pairs.len());
    let rows: Vec<EvalRow> = if threads == 1 {
        pairs.iter().map(score).collect::<Result<_>>()?
    } else {
        let chunk = pairs.len().div_ceil(threads);
        thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut rows = Vec::with_capacity(pairs.len());
            for h in handles {
                rows.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, CliError>(rows)
        })?
    };
    Ok(EvalReport::from_rows(rows)?)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    pairs: usize,
    mean: MeanJson,
    checkpoint: &'a str,
    data: &'a str,
}

#[derive(Serialize)]
struct MeanJson {
    id_dist: f64,
    expr_dist: f64,
    shape_dist: f64,
    ssim: f64,
}

pub fn eval_tsv(report: &EvalReport) -> String {
    let mut s = String::from(EVAL_HEADER);
    for (i, r) in report.rows.iter().enumerate() {
        s.push_str(&row_line(&i.to_string(), r));
    }
    s.push_str(&row_line("mean", &report.mean));
    s
}

/// Evaluates a checkpoint on a dataset directory, writing `eval.tsv` and
/// `eval.json` into `out`.
pub fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(ckpt, None, false)?;
    let (m, pairs) = read_dataset(data)?;
    if m.image_size != model.config.geometry.image_size {
        return Err(CliError::Data(format!(
            "dataset images are {}×{0}, model expects {1}×{1}",
            m.image_size, model.config.geometry.image_size
        )));
    }
    let report = evaluate_pairs(&model, &pairs, model.config.threads)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    io::write_atomic(&out.join("eval.tsv"), eval_tsv(&report).as_bytes())?;
    let mean = report.mean;
    let summary = EvalSummary {
        pairs: report.rows.len(),
        mean: MeanJson {
            id_dist: mean.id_dist,
            expr_dist: mean.expr_dist,
            shape_dist: mean.shape_dist,
            ssim: mean.ssim,
        },
        checkpoint: &ckpt.to_string_lossy(),
        data: &data.to_string_lossy(),
    };
    io::write_atomic(
        &out.join("eval.json"),
        &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(report)
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const ADVERSARIAL_TOL: f64 = 1e-3;

/// Config used by `gradcheck`: the given one with the 8×8 geometry forced.
pub fn micro_config(config: &Config) -> Config {
    let micro = Config::micro();
    let mut c = config.clone();
    c.geometry = micro.geometry;
    c.contextual.mask_select = micro.contextual.mask_select;
    c
}

pub fn gradcheck(config: &Config, fault: Option<BackwardFault>) -> Result<Vec<GroupCheck>> {
    let c = micro_config(config);
    let model = FaceTransformer::new(c.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let pair = sample_pair_sized(c.data_seed, c.geometry.image_size)?;
    Ok(model.gradcheck(&pair, GRADCHECK_TOL, ADVERSARIAL_TOL, None, fault)?)
}

pub fn gradcheck_table(rep: &[GroupCheck]) -> String {
    let mut s = String::from("group\tmax_rel_err\tthreshold\tworst_param\tentries\tstatus\n");
    for r in rep {
        let _ = writeln!(
            s,
            "{}\t{:.3e}\t{:.0e}\t{}\t{}\t{}",
            r.group,
            r.max_rel_err,
            r.threshold,
            r.worst_param,
            r.entries_checked,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

pub fn gen_data(out: &Path, n: usize, seed: u64, image_size: usize, png: bool) -> Result<Manifest> {
    write_dataset(out, n, seed, image_size, png)
}
