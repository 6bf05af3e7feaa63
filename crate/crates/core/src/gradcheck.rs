//! Central-difference gradient checker.

use crate::tape::{Gradients, ParamStore};

pub const REL_ERR_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

/// `|a - n| / max(|a|, |n|, eps)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_EPS)
}

impl GradReport {
    /// Largest relative error over entries whose analytic or numeric
    /// gradient magnitude exceeds `min_grad`.
    pub fn max_rel_err(&self, min_grad: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs().max(e.numeric.abs()) > min_grad)
            .map(|e| e.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_numeric(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.numeric.abs())
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Worst entry per parameter block, in store order.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((name, worst)) if *name == e.param => *worst = worst.max(e.rel_err),
                _ => out.push((e.param.clone(), e.rel_err)),
            }
        }
        out
    }
}

/// Compares `analytic` against `(f(p+h) - f(p-h)) / 2h` for every scalar
/// entry of every parameter in `params`.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, analytic: &Gradients, step: f64) -> GradReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(params.num_scalars());
    for id in params.ids() {
        let n = params.get(id).len();
        for k in 0..n {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = f(&work);
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = f(&work);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data()[k];
            entries.push(GradEntry {
                param: params.name(id).to_string(),
                index: k,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    GradReport { entries }
}
