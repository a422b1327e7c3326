//! Central-difference verification of analytic gradients.

use alloc::format;
use alloc::string::String;

use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over scalars of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub scalars_checked: usize,
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// `(f(θ + h) - f(θ - h)) / 2h` for every trainable scalar in `store`.
///
/// `loss_fn` records a scalar loss into the supplied graph and returns it.
pub fn grad_check<F>(store: &mut ParamStore<f64>, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Parameter(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    let mut analytic = ParamGrads::zeros_like(store);
    {
        let mut g = Graph::new(&*store);
        let loss = loss_fn(&mut g)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        g.backward(loss, &mut analytic)?;
    }

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        scalars_checked: 0,
    };
    let ids: alloc::vec::Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.tensor(id).len() {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.get(id)[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.scalars_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
