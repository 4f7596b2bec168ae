//! Central finite-difference harness.
//!
//! The check is independent of the reverse-mode path: it only re-evaluates
//! the forward loss at perturbed parameter values.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numcore::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Largest relative error between analytic and finite-difference gradients,
/// with the offending parameter name and element index.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Compare analytic gradients against central differences of `loss_fn`.
/// `loss_fn` must rebuild the forward pass from scratch for the given
/// parameter values (dropout off or with a fixed mask).
pub fn check_gradients(
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    mut loss_fn: impl FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut work = params.clone();
    for (name, p) in params {
        let grad = &analytic[name];
        for i in 0..p.len() {
            let orig = p.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(fd, grad.data()[i]);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
