//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Gradient magnitude, per unit of loss, below which entries are compared
/// absolutely. Central-difference rounding error grows with `|loss| / h`.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of the scalar built by `loss` against
/// central differences with step `h`, visiting at most `per_param` evenly
/// spaced entries of every parameter whose name passes `select`.
pub fn check_gradients<F>(
    params: &ParamStore<f64>,
    loss: F,
    h: f64,
    per_param: usize,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let (grads, value) = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        (g.backward(l)?, g.value(l).data()[0])
    };
    let floor = GRAD_FLOOR * value.abs().max(1.0);
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut work = params.clone();
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let analytic = grads.dense(params, id);
        let len = params.get(id).len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            let mut v: Vec<usize> = (0..per_param).map(|k| k * (len - 1) / (per_param - 1).max(1)).collect();
            v.dedup();
            v
        };
        for i in picks {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let e = relative_error(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
