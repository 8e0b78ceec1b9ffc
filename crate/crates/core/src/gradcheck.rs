//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f32 = 1e-6;

/// Per-coordinate comparison outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    pub worst_analytic: f32,
    pub worst_numeric: f32,
    pub coords: usize,
}

fn rel_err(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

fn eval_scalar(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new(false);
    let v = g.input(x.clone(), false);
    let out = f(&mut g, v)?;
    let val = g.value(out);
    if val.len() != 1 || !val.all_finite() {
        return Err(Error::Numerical("grad_check needs a finite scalar function".into()));
    }
    Ok(val.item() as f64)
}

/// Maximum relative error between the analytic gradient of the scalar
/// function `f` at `point` and central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)`, over every coordinate.
pub fn grad_check(f: impl Fn(&mut Graph, Var) -> Result<Var>, point: &Tensor, eps: f32) -> Result<f32> {
    Ok(grad_check_report(&f, point, eps, None)?.max_rel_err)
}

/// Analytic gradient of the scalar function `f` at `point`.
pub fn analytic_grad(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, point: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(false);
    let v = g.input(point.clone(), true);
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::Numerical("grad_check needs a scalar function".into()));
    }
    g.backward(out)?;
    Ok(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(point.shape().to_vec())))
}

/// True when every gradient component is either exactly zero or at least
/// `min_abs` in magnitude. In f32 the rounding of intermediate values puts
/// an absolute noise floor of roughly `1e-4` on central differences with
/// `eps = 1e-3`, so relative errors of components far below that floor
/// measure rounding rather than the gradient.
pub fn well_conditioned(grad: &Tensor, min_abs: f32) -> bool {
    grad.data().iter().all(|&g| g == 0.0 || g.abs() >= min_abs)
}

/// As [`grad_check`], restricted to the listed coordinates when given.
pub fn grad_check_report(
    f: &dyn Fn(&mut Graph, Var) -> Result<Var>,
    point: &Tensor,
    eps: f32,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let analytic = analytic_grad(f, point)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords: coords.len(),
    };
    let mut x = point.clone();
    for &i in coords {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let fp = eval_scalar(f, &x)?;
        x.data_mut()[i] = orig - eps;
        let fm = eval_scalar(f, &x)?;
        x.data_mut()[i] = orig;
        let numeric = ((fp - fm) / (2.0 * eps as f64)) as f32;
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        if e > report.max_rel_err || e.is_nan() {
            report.max_rel_err = e;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Finite-difference check with respect to model parameters.
///
/// `build` maps bound parameters to a scalar. Up to `per_tensor`
/// coordinates of each tensor are probed, drawn by `rng` from those whose
/// analytic gradient is at least `min_abs` in magnitude (see
/// [`well_conditioned`]).
pub fn grad_check_params(
    build: &dyn for<'a> Fn(&mut Graph<'a>, &Bound) -> Result<Var>,
    store: &ParamStore,
    eps: f32,
    per_tensor: usize,
    min_abs: f32,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(false);
        let bound = g.bind(store, true);
        let out = build(&mut g, &bound)?;
        g.backward(out)?;
        g.param_grads(&bound)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(false);
        let bound = g.bind(s, false);
        let out = build(&mut g, &bound)?;
        let v = g.value(out);
        if !v.all_finite() {
            return Err(Error::Numerical("non-finite value during grad_check".into()));
        }
        Ok(v.item() as f64)
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords: 0,
    };
    for id in store.ids() {
        let mut eligible: Vec<usize> = analytic[id.index()]
            .data()
            .iter()
            .enumerate()
            .filter(|(_, g)| g.abs() >= min_abs)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut eligible);
        eligible.truncate(per_tensor);
        let picks = eligible;
        for i in picks {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = ((fp - fm) / (2.0 * eps as f64)) as f32;
            let a = analytic[id.index()].data()[i];
            let e = rel_err(a, numeric);
            report.coords += 1;
            if e > report.max_rel_err || e.is_nan() {
                report.max_rel_err = e;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
