//! Central finite-difference verification of autodiff gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{BackwardFault, Graph, NodeId};
use crate::tensor::Tensor;

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter, evenly spaced.
    pub max_entries: Option<usize>,
    pub fault: Option<BackwardFault>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tol
    }
}

pub(crate) fn entry_indices(numel: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(m) if m < numel => (0..m).map(|i| i * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences, one parameter tensor at a time.
///
/// `f` receives a fresh graph plus one leaf per parameter (in `params` order)
/// and must return a scalar node. It is re-run twice per checked entry.
pub fn finite_diff_check<F>(mut f: F, params: &[(String, Tensor)], opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    g.inject_fault(opts.fault);
    let mut ids = Vec::with_capacity(params.len());
    for (_, t) in params {
        ids.push(g.variable(t.clone())?);
    }
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id)).collect();
    drop(g);

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(values.len());
        for t in values {
            ids.push(g.constant(t.clone())?);
        }
        let l = f(&mut g, &ids)?;
        Ok(g.item(l))
    };

    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let mut rep = ParamReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            entries_checked: 0,
        };
        for e in entry_indices(t.numel(), opts.max_entries) {
            let orig = t.data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[e];
            let err = relative_error(a, numeric);
            if err > rep.max_rel_err || rep.entries_checked == 0 {
                rep.max_rel_err = err;
                rep.worst_entry = e;
                rep.analytic = a;
                rep.numeric = numeric;
            }
            rep.entries_checked += 1;
        }
        reports.push(rep);
    }
    Ok(FdReport {
        params: reports,
        tol: opts.tol,
    })
}
