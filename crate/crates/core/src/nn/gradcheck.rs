//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, Var};
use super::param::{ParamStore, Parameter};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    /// Absolute error always accepted, for gradients near zero.
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-5,
            rel: 1e-4,
            abs: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Largest `|a − n| / max(abs, rel·max(|a|, |n|))`; at most 1 passes.
    pub worst_score: f64,
    pub worst: Option<Mismatch>,
    /// Largest gradient magnitude seen, to tell a vacuous check from a real one.
    pub max_abs_grad: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_score <= 1.0
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_abs_grad = self.max_abs_grad.max(other.max_abs_grad);
        if other.worst_score > self.worst_score {
            self.worst_score = other.worst_score;
            self.worst = other.worst;
        }
    }
}

/// Compares the tape gradient of `loss` against central differences for
/// every element of the parameters picked by `select`. At most `limit`
/// elements per parameter are probed, evenly strided.
pub fn check(
    store: &mut ParamStore,
    select: impl Fn(&Parameter) -> bool,
    loss: impl Fn(&ParamStore) -> Result<(Graph, Var)>,
    tol: Tolerance,
    limit: Option<usize>,
) -> Result<GradReport> {
    store.zero_grad();
    let (g, l) = loss(store)?;
    let grads = g.backward(l)?;
    grads.accumulate(&g, store, |p| select(p).then_some(1.0));
    let eval = |store: &ParamStore| -> Result<f64> {
        let (g, l) = loss(store)?;
        Ok(g.value(l).item())
    };

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| select(p))
        .map(|(id, _)| id)
        .collect();
    let mut report = GradReport::default();
    for id in ids {
        let n = store.get(id).value.len();
        let stride = limit.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + tol.step;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - tol.step;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * tol.step);
            let analytic = store.get(id).grad.data()[i];
            let allowed = tol.abs.max(tol.rel * analytic.abs().max(numeric.abs()));
            let score = (analytic - numeric).abs() / allowed;
            report.checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(analytic.abs());
            if !(score <= report.worst_score) {
                report.worst_score = score;
                report.worst = Some(Mismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
